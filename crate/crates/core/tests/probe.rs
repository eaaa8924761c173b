mod common;
use common::synthetic_fixture;
use dstqa_core::corpus::{build_examples, ExampleMode, NegativePolicy, QueryStyle};
use dstqa_core::model::{ModelConfig, ModelParams};
use dstqa_core::training::{train, LossMaskMode, TrainConfig};
use std::time::Instant;

#[test]
fn probe_overfit_trajectory() {
    let (dialogs, registry, tokenizer) = synthetic_fixture(7, 32);
    let examples = build_examples(&dialogs, &registry, &tokenizer, ExampleMode::Plain,
        QueryStyle::Question, NegativePolicy::default(), 160).unwrap();
    let config = ModelConfig::tiny(tokenizer.vocab_size(), 160);
    let params = ModelParams::<f32>::init(&config, 7).unwrap();
    let t0 = Instant::now();
    let outcome = train(params, &examples, &dialogs, &TrainConfig {
        learning_rate: 1e-3, batch_size: 32, max_epochs: 200, shards: 2,
        eval_every: 10, patience: 1000, target_jga: Some(0.95),
        ..TrainConfig::default()
    }, LossMaskMode::Clmq, &tokenizer, &registry, false).unwrap();
    for r in &outcome.log {
        if r.val_jga.is_some() || r.epoch % 10 == 0 {
            println!("epoch {:3} loss {:.4} jga {:?}", r.epoch, r.loss, r.val_jga);
        }
    }
    println!("total {:.1}s best jga {:?} at epoch {}",
        t0.elapsed().as_secs_f64(), outcome.best_val_jga, outcome.best_epoch);
}
