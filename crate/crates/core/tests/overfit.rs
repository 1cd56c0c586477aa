use promptmad::config::Config;
use promptmad::dataio::generate_synthetic_corpus;
use promptmad::decoder::DecoderConfig;
use promptmad::segmentor::SegmentorConfig;
use promptmad::trainer::{materialize, plan_epoch, StreamAudit, Trainer};
use promptmad::{Execution, Result};

fn losses_on_fixed_batch(seed: u64, steps: usize) -> Result<Vec<f64>> {
    let mut cfg = Config::default();
    cfg.decoder = DecoderConfig { n_layers: 1, n_heads: 4, ff_dim: 64, ..Default::default() };
    cfg.segmentor = SegmentorConfig { width: 8, stem_width: 4, up_width: 4, d_t: 8, heads: 2, ..Default::default() };
    cfg.train.seed = seed;
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 4;
    let corpus = generate_synthetic_corpus(2, 2, 1, seed, Execution::default())?;
    let train = corpus.train();
    let plan = plan_epoch(&cfg, train.len(), 0, &mut StreamAudit::default()).remove(0);
    let batch = materialize(&plan, &train, &cfg, Execution::default())?;
    let mut trainer = Trainer::new(&cfg, &corpus, Execution::default())?;
    (0..steps).map(|_| trainer.step_on(&batch, cfg.train.lr, None)?.total_value()).collect()
}

#[test]
fn composite_loss_falls_monotonically_on_a_fixed_batch() -> Result<()> {
    let mut monotone = 0;
    for seed in 0..20 {
        let l = losses_on_fixed_batch(seed, 20)?;
        if l.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        } else {
            eprintln!("seed {seed}: {l:?}");
        }
    }
    assert!(monotone >= 19, "{monotone}/20 seeds decreased monotonically");
    Ok(())
}
