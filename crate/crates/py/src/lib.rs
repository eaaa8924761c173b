use pyo3::prelude::*;

#[pymodule]
fn dstqa_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
