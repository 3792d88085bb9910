use dsmyolo::blocks::{
    grad_check_block, run_block, Block, Ctx, EcaConfig, EcaConv, EcaCsp, Ffn, Init, ParamStore,
    SimVss, Stem, Summary, Vss, VssConfig,
};
use dsmyolo::tensor::kernels::{self, NormMode};
use dsmyolo::tensor::{Tape, Tensor};
use dsmyolo::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input<T: Float>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

fn small_vss() -> VssConfig {
    VssConfig {
        state: 4,
        ..VssConfig::default()
    }
}

fn tape_flops<T: Float, B: Block>(block: &B, store: &ParamStore<T>, x: &Tensor<T>) -> u64 {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, store, NormMode::Infer);
    let xv = ctx.tape.constant(x.clone());
    block.forward(&mut ctx, xv).unwrap();
    tape.flops()
}

fn assert_accounting<T: Float, B: Block>(block: &B, store: &ParamStore<T>, shape: [usize; 4]) {
    let mut s = Summary::default();
    let out = block.trace(shape, &mut s).unwrap();
    assert_eq!(s.total_params(), store.num_params());
    let x = input::<T>(0, &shape);
    let y = run_block(block, store, &x, NormMode::Infer).unwrap();
    assert_eq!(y.shape(), out);
    assert_eq!(s.total_flops(), tape_flops(block, store, &x));
}

#[test]
fn eca_zero_attention_halves_attended_channels() {
    let mut store = ParamStore::<f64>::new();
    let eca = EcaConv::new(
        &mut Init::new(&mut store, 1),
        "eca",
        4,
        8,
        3,
        1,
        &EcaConfig::default(),
    )
    .unwrap();
    store.zero("eca.attn.weight").unwrap();
    let x = input::<f64>(2, &[2, 4, 5, 5]);

    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &store, NormMode::Infer);
    let xv = ctx.tape.constant(x);
    let conv = eca.conv.forward(&mut ctx, xv).unwrap();
    let pre = eca.forward_unshuffled(&mut ctx, xv).unwrap();
    let (conv, pre) = (tape.value(conv), tape.value(pre));
    for n in 0..2 {
        for c in 0..8 {
            let factor = if c < eca.c_hat { 0.5 } else { 1.0 };
            for i in 0..25 {
                let (h, w) = (i / 5, i % 5);
                assert_eq!(pre.at4(n, c, h, w), factor * conv.at4(n, c, h, w));
            }
        }
    }
}

#[test]
fn eca_full_attention_has_no_bypass() {
    let mut store = ParamStore::<f64>::new();
    let cfg = EcaConfig {
        sigma: 1.0,
        ..EcaConfig::default()
    };
    let eca = EcaConv::new(&mut Init::new(&mut store, 1), "eca", 4, 6, 3, 2, &cfg).unwrap();
    assert_eq!(eca.c_hat, 6);
    let y = run_block(
        &eca,
        &store,
        &input::<f64>(3, &[1, 4, 6, 6]),
        NormMode::Infer,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 6, 3, 3]);
}

#[test]
fn eca_matches_scripted_composition() {
    fn oracle<T: Float>(store: &ParamStore<T>, x: &Tensor<T>, c_hat: usize) -> Tensor<T> {
        let w = store.param("eca.conv.conv.weight").unwrap();
        let y = kernels::conv2d(x, w, None, 1, 1, 1).unwrap();
        let (mut rm, mut rv) = (
            store
                .buffer("eca.conv.bn.running_mean")
                .unwrap()
                .data()
                .to_vec(),
            store
                .buffer("eca.conv.bn.running_var")
                .unwrap()
                .data()
                .to_vec(),
        );
        let (y, _) = kernels::batch_norm(
            &y,
            store.param("eca.conv.bn.weight").unwrap().data(),
            store.param("eca.conv.bn.bias").unwrap().data(),
            &mut rm,
            &mut rv,
            NormMode::Infer,
            kernels::BN_EPS,
            kernels::BN_MOMENTUM,
        )
        .unwrap();
        let y = kernels::activation(&y, kernels::Activation::Silu);
        let (n, c, h, wd) = y.dims4("oracle").unwrap();
        let parts = kernels::split_channels(&y, &[c_hat, c - c_hat]).unwrap();
        let pooled = kernels::global_avg_pool(&parts[0])
            .unwrap()
            .reshape(&[n, 1, c_hat])
            .unwrap();
        let gate = kernels::conv1d(&pooled, store.param("eca.attn.weight").unwrap()).unwrap();
        let gate = kernels::activation(&gate, kernels::Activation::Sigmoid);
        let mut att = parts[0].clone();
        for b in 0..n {
            for ch in 0..c_hat {
                let g = gate.data()[b * c_hat + ch];
                for v in &mut att.data_mut()[(b * c_hat + ch) * h * wd..][..h * wd] {
                    *v *= g;
                }
            }
        }
        let cat = kernels::concat_channels(&[&att, &parts[1]]).unwrap();
        kernels::channel_shuffle(&cat, 2).unwrap()
    }
    let mut store = ParamStore::<f32>::new();
    let eca = EcaConv::new(
        &mut Init::new(&mut store, 5),
        "eca",
        8,
        8,
        3,
        1,
        &EcaConfig::default(),
    )
    .unwrap();
    // non-trivial running statistics
    store
        .buffer_mut("eca.conv.bn.running_mean")
        .unwrap()
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = 0.1 * i as f32);
    store
        .buffer_mut("eca.conv.bn.running_var")
        .unwrap()
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = 0.5 + 0.1 * i as f32);
    let x = input::<f32>(6, &[1, 8, 4, 4]);
    let got = run_block(&eca, &store, &x, NormMode::Infer).unwrap();
    let want = oracle(&store, &x, eca.c_hat);
    assert!(
        got.max_abs_diff(&want) <= 1e-6,
        "{}",
        got.max_abs_diff(&want)
    );
}

#[test]
fn eca_attention_in_unit_interval() {
    let mut store = ParamStore::<f64>::new();
    let eca = EcaConv::new(
        &mut Init::new(&mut store, 9),
        "eca",
        4,
        8,
        3,
        1,
        &EcaConfig::default(),
    )
    .unwrap();
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &store, NormMode::Infer);
    let xv = ctx
        .tape
        .constant(input::<f64>(10, &[3, 8, 4, 4]).map(|v| 30.0 * v));
    let att = ctx.tape.narrow_channels(xv, 0, eca.c_hat).unwrap();
    let gate = eca.attention(&mut ctx, att).unwrap();
    assert!(tape.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn csp_preserves_spatial_size() {
    for repeats in [0, 1, 2] {
        let mut store = ParamStore::<f64>::new();
        let csp = EcaCsp::new(
            &mut Init::new(&mut store, 1),
            "csp",
            6,
            8,
            repeats,
            true,
            &EcaConfig::default(),
        )
        .unwrap();
        let y = run_block(
            &csp,
            &store,
            &input::<f64>(2, &[2, 6, 7, 5]),
            NormMode::Infer,
        )
        .unwrap();
        assert_eq!(y.shape(), [2, 8, 7, 5]);
        assert_eq!(csp.units.len(), repeats);
        assert_accounting(&csp, &store, [1, 6, 8, 8]);
    }
}

#[test]
fn vss_zero_output_projection_gives_zero() {
    let mut store = ParamStore::<f64>::new();
    let vss = Vss::new(&mut Init::new(&mut store, 1), "vss", 4, &small_vss()).unwrap();
    store.zero("vss.out_proj.weight").unwrap();
    let y = run_block(
        &vss,
        &store,
        &input::<f64>(2, &[1, 4, 3, 5]),
        NormMode::Infer,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 4, 3, 5]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn vss_shape_and_accounting() {
    let mut store = ParamStore::<f64>::new();
    let vss = Vss::new(&mut Init::new(&mut store, 1), "vss", 4, &small_vss()).unwrap();
    let y = run_block(
        &vss,
        &store,
        &input::<f64>(2, &[2, 4, 3, 5]),
        NormMode::Infer,
    )
    .unwrap();
    assert_eq!(y.shape(), [2, 4, 3, 5]);
    assert!(y.all_finite());
    assert_accounting(&vss, &store, [1, 4, 3, 5]);
}

#[test]
fn ffn_zero_output_gives_zero() {
    let mut store = ParamStore::<f64>::new();
    let ffn = Ffn::new(&mut Init::new(&mut store, 1), "ffn", 4, 2).unwrap();
    for n in ffn.output_params() {
        store.zero(&n).unwrap();
    }
    let y = run_block(
        &ffn,
        &store,
        &input::<f64>(2, &[1, 4, 3, 3]),
        NormMode::Infer,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 4, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_accounting(&ffn, &store, [1, 4, 3, 3]);
}

#[test]
fn simvss_residual_identity() {
    let mut store = ParamStore::<f32>::new();
    let block = SimVss::new(&mut Init::new(&mut store, 3), "sv", 8, 2, &small_vss()).unwrap();
    for n in block.residual_output_params() {
        store.zero(&n).unwrap();
    }
    let x = input::<f32>(4, &[2, 8, 4, 6]);
    let y = run_block(&block, &store, &x, NormMode::Infer).unwrap();

    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &store, NormMode::Infer);
    let xv = ctx.tape.constant(x);
    let p = block.in_proj.forward(&mut ctx, xv).unwrap();
    let q = block.out_proj.forward(&mut ctx, p).unwrap();
    let want = tape.value(q);
    assert_eq!(y.shape(), [2, 8, 4, 6]);
    assert!(y.max_abs_diff(want) <= 1e-7);
}

#[test]
fn simvss_rejects_odd_channels() {
    let mut store = ParamStore::<f64>::new();
    assert!(SimVss::new(&mut Init::new(&mut store, 3), "sv", 7, 2, &small_vss()).is_err());
}

#[test]
fn simvss_accounting() {
    let mut store = ParamStore::<f64>::new();
    let block = SimVss::new(&mut Init::new(&mut store, 3), "sv", 8, 2, &small_vss()).unwrap();
    assert_accounting(&block, &store, [1, 8, 4, 4]);
}

#[test]
fn stem_quarter_resolution() {
    let mut store = ParamStore::<f32>::new();
    let stem = Stem::new(&mut Init::new(&mut store, 1), "stem", 3, 16).unwrap();
    let y = run_block(
        &stem,
        &store,
        &input::<f32>(1, &[1, 3, 64, 64]),
        NormMode::Infer,
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 16, 16, 16]);
    let mut s = Summary::default();
    assert_eq!(
        stem.trace([1, 3, 640, 640], &mut s).unwrap(),
        [1, 16, 160, 160]
    );
    // 3*8*9 + 2*8 + 8*16*9 + 2*16
    assert_eq!(s.total_params(), 216 + 16 + 1152 + 32);
    assert!(stem.trace([1, 3, 62, 64], &mut Summary::default()).is_err());
    assert!(run_block(
        &stem,
        &store,
        &input::<f32>(1, &[1, 3, 66, 64]),
        NormMode::Infer
    )
    .is_err());
}

#[test]
fn block_gradients_single_seed() {
    let mode = NormMode::Train;
    let mut store = ParamStore::<f64>::new();
    let csp = EcaCsp::new(
        &mut Init::new(&mut store, 1),
        "csp",
        8,
        8,
        1,
        true,
        &EcaConfig::default(),
    )
    .unwrap();
    let r = grad_check_block(&csp, &store, &input(2, &[1, 8, 6, 6]), mode, 1e-4, 3).unwrap();
    assert!(r.pass, "ecacsp {r:?}");

    let mut store = ParamStore::<f64>::new();
    let vss = Vss::new(&mut Init::new(&mut store, 1), "vss", 4, &small_vss()).unwrap();
    let r = grad_check_block(&vss, &store, &input(2, &[1, 4, 4, 4]), mode, 1e-4, 3).unwrap();
    assert!(r.pass, "vss {r:?}");

    let mut store = ParamStore::<f64>::new();
    let sv = SimVss::new(&mut Init::new(&mut store, 1), "sv", 8, 2, &small_vss()).unwrap();
    let r = grad_check_block(&sv, &store, &input(2, &[1, 8, 4, 4]), mode, 1e-4, 3).unwrap();
    assert!(r.pass, "simvss {r:?}");
}
