// Throwaway probe: per-example train cost at candidate model sizes.
use pccot_core::data::{generate, GenConfig};
use pccot_core::model::{ModelConfig, TransformerWeights};
use pccot_core::reasoning::{Mode, ReasoningConfig};
use pccot_core::tokenizer::Tokenizer;
use pccot_core::train::{batch_gradients, LossWeights, TrainExample};
use pccot_core::Precision;
use std::time::Instant;

fn main() {
    let tok = Tokenizer::new();
    let ds = generate(&GenConfig { train: 64, dev: 1, test: 1, ..GenConfig::default() }).unwrap();
    let batch: Vec<TrainExample> =
        ds.train.iter().map(|e| TrainExample::from_arithmetic(e, &tok).unwrap()).collect();
    let st = tok.specials();
    let lw = LossWeights::default();

    for (d, d_ff, layers) in [(24usize, 96usize, 2usize), (32, 128, 2), (48, 192, 2)] {
        let config = ModelConfig {
            layers,
            heads: 2,
            d_model: d,
            d_ff,
            vocab: tok.vocab_size(),
            max_positions: 160,
            precision: Precision::F32,
        };
        let w = TransformerWeights::<f32>::init(config, 0).unwrap();
        for (mode, c, t) in [(Mode::Pccot, 8, 3), (Mode::Ccot, 8, 0), (Mode::Icot, 0, 0)] {
            let rcfg = ReasoningConfig { mode, latent_count: c, extra_iterations: t };
            let start = Instant::now();
            let reps = 3;
            for _ in 0..reps {
                let _ = batch_gradients(&w, &st, &batch, &rcfg, &lw, None).unwrap();
            }
            let per_ex = start.elapsed().as_secs_f64() / (reps * batch.len()) as f64;
            println!("d={d} dff={d_ff} L={layers} mode={mode:?} c={c} T={t}: {:.3} ms/example", per_ex * 1e3);
        }
    }
}
