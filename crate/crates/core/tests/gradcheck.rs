use overdilute::gradcheck::{model_suite, op_suite};
use overdilute::model::{ModelConfig, ModelKind};

const TOL: f64 = 1e-4;
const SEEDS: std::ops::Range<u64> = 0..10;

#[test]
fn every_op_matches_finite_differences() {
    for seed in SEEDS {
        for (name, err) in op_suite(seed).unwrap() {
            assert!(err <= TOL, "{name} seed {seed}: rel err {err:.3e}");
        }
    }
}

fn check(cfg: ModelConfig) {
    for seed in SEEDS {
        let err = model_suite(&cfg, seed).unwrap();
        assert!(err <= TOL, "{} seed {seed}: rel err {err:.3e}", cfg.kind);
    }
}

#[test]
fn gcn_two_layers() {
    check(ModelConfig {
        layers: 2,
        hidden: 4,
        dropout: 0.0,
        ..ModelConfig::new(ModelKind::Gcn)
    });
}

#[test]
fn gat_one_layer() {
    check(ModelConfig {
        layers: 1,
        hidden: 4,
        gat_heads: 2,
        dropout: 0.0,
        ..ModelConfig::new(ModelKind::Gat)
    });
}

#[test]
fn natr_gcn_two_encoder_two_decoder_layers() {
    check(ModelConfig {
        layers: 2,
        encoder_layers: 2,
        hidden: 4,
        heads: 2,
        d_ffn: 8,
        dropout: 0.0,
        ..ModelConfig::new(ModelKind::NatrGcn)
    });
}
