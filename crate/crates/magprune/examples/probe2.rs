use magprune::data::corpus::pack_mlm_corpus;
use magprune::data::vocab::Vocab;
use magprune::model::{HeadKind, ModelConfig};
use magprune::train::{pretrain_run, InitModel, TrainRunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let peak: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-4);

    // Deterministic-pair corpus: tokens come in (qN, rN) pairs; a masked
    // member of a pair is fully recoverable from its neighbour.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n_pairs = 40;
    let mut text = String::new();
    for _ in 0..2000 {
        let mut doc = Vec::new();
        for _ in 0..15 {
            let k = rng.random_range(0..n_pairs);
            doc.push(format!("q{k}"));
            doc.push(format!("r{k}"));
        }
        text.push_str(&doc.join(" "));
        text.push('\n');
    }
    let vocab = Vocab::build(&text, 256).unwrap();
    let corpus = pack_mlm_corpus(&text, &vocab, 32);
    eprintln!("vocab {} seqs {}", vocab.len(), corpus.train.len());

    let model = ModelConfig {
        vocab_size: vocab.len(),
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 64,
        max_seq_len: 48,
        head: HeadKind::Mlm,
        dropout: 0.0,
    };
    let mut run = TrainRunConfig::pretrain_dense(1);
    run.epochs = epochs;
    run.peak_lr = peak;
    run.log_every = 100;
    let out = pretrain_run(
        &corpus,
        &run,
        InitModel::Fresh {
            config: model,
            seed: 1,
        },
        None,
    )
    .unwrap();
    for r in out.log.iter().rev().take(5).rev() {
        eprintln!("step {:4} lr {:.2e} loss {:.3}", r.step, r.lr, r.loss);
    }
    eprintln!(
        "held-out {:.3} -> {:.3}",
        out.initial_held_out_loss, out.final_held_out_loss
    );
}
