use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samba_core::layers::SwaParams;
use samba_core::model::{LayerParams, Model};
use samba_core::{ArchitecturePattern, Error, LayerKind, ModelConfig};

fn toy(arch: ArchitecturePattern, n_layers: usize) -> ModelConfig {
    let mut cfg = ModelConfig::with_d_model(64);
    cfg.arch = arch;
    cfg.n_layers = n_layers;
    cfg.window = 64;
    cfg
}

#[test]
fn builds_are_deterministic() {
    let cfg = toy(ArchitecturePattern::Samba, 4);
    assert_eq!(Model::build(&cfg).unwrap(), Model::build(&cfg).unwrap());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(Model::build(&cfg).unwrap().embed, Model::build(&other).unwrap().embed);
}

#[test]
fn llama_swa_parameter_count_is_closed_form() {
    let mut cfg = toy(ArchitecturePattern::LlamaSwa, 4);
    cfg.d_mlp = 171;
    let m = Model::build(&cfg).unwrap();
    let (dm, v, dp) = (64, 256, 171);
    let (qw, kw) = (cfg.n_q_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim);
    let swa = dm * qw + 2 * dm * kw + qw * dm;
    let mlp = 3 * dm * dp;
    let expected = v * dm + dm * v + dm + 4 * dm + 2 * swa + 2 * mlp;
    assert_eq!(m.param_count(), expected);
}

#[test]
fn every_mamba_layer_starts_at_s4d_real() {
    let m = Model::build(&toy(ArchitecturePattern::Samba, 8)).unwrap();
    let mut seen = 0;
    for l in &m.layers {
        if let LayerParams::Mamba(p) = &l.params {
            seen += 1;
            let (de, ds) = p.a.rows_cols();
            for i in 0..de {
                for j in 0..ds {
                    assert_eq!(p.a.at(&[i, j]), ((j + 1) as f64).ln());
                }
            }
        }
    }
    assert_eq!(seen, 2);
}

#[test]
fn initial_loss_is_near_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens: Vec<usize> = (0..257).map(|_| rng.gen_range(0..256)).collect();
    for arch in ArchitecturePattern::ALL {
        let m = Model::build(&toy(arch, arch.period().len() * 2)).unwrap();
        let loss = m.loss(&tokens).unwrap();
        let ln_v = 256f64.ln();
        assert!((loss - ln_v).abs() < 0.05 * ln_v, "{arch}: {loss}");
    }
}

#[test]
fn loss_contracts() {
    let m = Model::build(&toy(ArchitecturePattern::Mamba, 1)).unwrap();
    assert!(matches!(m.loss(&[3]), Err(Error::Contract(_))));
    assert!(matches!(m.forward(&[3, 256]), Err(Error::Index { .. })));
}

#[test]
fn backward_populates_every_gradient() {
    let m = Model::build(&toy(ArchitecturePattern::Samba, 4)).unwrap();
    let rows = vec![(0..33).map(|i| (i * 5) % 256).collect::<Vec<_>>(); 2];
    let (loss, grads) = m.loss_and_grads(&rows, None).unwrap();
    assert!(loss.is_finite());
    let named = m.named_params();
    assert_eq!(grads.len(), named.len());
    for (g, (name, t)) in grads.iter().zip(&named) {
        assert_eq!(g.len(), t.numel(), "{name}");
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn head_is_untied() {
    let mut m = Model::build(&toy(ArchitecturePattern::Samba, 4)).unwrap();
    let head = m.head.clone();
    m.embed.data_mut()[..64].fill(3.0);
    assert_eq!(m.head, head);
}

#[test]
fn whole_model_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in ArchitecturePattern::ALL {
        let mut cfg = ModelConfig::with_d_model(16);
        cfg.arch = arch;
        cfg.n_layers = arch.period().len();
        cfg.window = 5;
        let m = Model::build(&cfg).unwrap();
        let toks: Vec<usize> = (0..24).map(|_| rng.gen_range(0..256)).collect();
        let base = m.forward(&toks).unwrap();
        let t = rng.gen_range(0..23);
        let mut alt = toks.clone();
        for v in &mut alt[t + 1..] {
            *v = rng.gen_range(0..256);
        }
        let out = m.forward(&alt).unwrap();
        let w = 256 * (t + 1);
        assert_eq!(&out.data()[..w], &base.data()[..w], "{arch}");
    }
}

#[test]
fn nope_variant_keeps_shapes() {
    let cfg = toy(ArchitecturePattern::Samba, 4);
    let mut nope = cfg.clone();
    nope.rope_enabled = false;
    let a = Model::build(&cfg).unwrap();
    let b = Model::build(&nope).unwrap();
    assert_eq!(a.kinds(), b.kinds());
    let shapes = |m: &Model| m.named_params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(shapes(&a), shapes(&b));
    let out = b.forward(&[1, 2, 3, 4, 5]).unwrap();
    assert!(out.data().iter().all(|v| v.is_finite()));
    for l in &b.layers {
        if let LayerParams::Swa(SwaParams { geom, .. }) = &l.params {
            assert!(!geom.rope_enabled);
        }
    }
}

#[test]
fn pattern_order_is_mamba_leading() {
    let m = Model::build(&toy(ArchitecturePattern::Samba, 4)).unwrap();
    assert_eq!(m.kinds(), vec![LayerKind::Mamba, LayerKind::Mlp, LayerKind::Swa, LayerKind::Mlp]);
    assert!(m.named_params().iter().any(|(n, _)| n == "layers.2.swa.w_q"));
}

#[test]
fn config_round_trips_through_text() {
    let mut cfg = toy(ArchitecturePattern::MambaSwaMlp, 6);
    cfg.rope_base = 500.5;
    cfg.rms_eps = 1e-6;
    let text = samba_core::kv::render(&cfg.to_pairs());
    let mut back = ModelConfig::with_d_model(8);
    for e in samba_core::kv::parse(&text).unwrap() {
        assert!(back.apply(&e).unwrap());
    }
    assert_eq!(back, cfg);
}
