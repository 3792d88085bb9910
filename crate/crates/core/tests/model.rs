use dsmyolo::blocks::{Block, Conv2d, Init, ParamStore, Summary};
use dsmyolo::model::{
    box_iou, decode, load_checkpoint, nms, save_checkpoint, Detection, HeadMaps, Model,
    ModelConfig, ScaleSpec,
};
use dsmyolo::tensor::kernels::sigmoid;
use dsmyolo::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Model<f32> {
    Model::build(&ModelConfig::new(ScaleSpec::tiny(3)), 11).unwrap()
}

fn image(seed: u64, n: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[n, 3, h, w], 0.0, 1.0, &mut rng)
}

#[test]
fn same_seed_same_weights() {
    let a = tiny();
    let b = tiny();
    assert_eq!(a.store, b.store);
    let c = Model::<f32>::build(&ModelConfig::new(ScaleSpec::tiny(3)), 12).unwrap();
    assert_ne!(a.store, c.store);
}

#[test]
fn small_input_grids_and_determinism() {
    let m = tiny();
    let x = image(1, 2, 64, 64);
    let out = m.forward(&x).unwrap();
    let grids: Vec<_> = out
        .maps
        .cls
        .iter()
        .map(|t| (t.shape()[2], t.shape()[3]))
        .collect();
    assert_eq!(grids, [(8, 8), (4, 4), (2, 2)]);
    for (lvl, (c, r)) in out.maps.cls.iter().zip(&out.maps.reg).enumerate() {
        assert_eq!(c.shape()[..2], [2, 3]);
        assert_eq!(r.shape()[..2], [2, 4]);
        assert!(
            r.data().iter().all(|&v| v >= 0.0),
            "level {lvl} has negative distances"
        );
        assert_eq!(out.pyramid[lvl].shape()[1], m.arch.channels[lvl + 2]);
    }
    assert_eq!(out, m.forward(&x).unwrap());
}

#[test]
fn non_square_input() {
    let m = tiny();
    let out = m.forward(&image(2, 1, 64, 96)).unwrap();
    assert_eq!(out.maps.cls[0].shape(), [1, 3, 8, 12]);
    assert_eq!(out.maps.reg[2].shape(), [1, 4, 2, 3]);
}

#[test]
fn indivisible_input_names_padding() {
    let m = tiny();
    let err = m.forward(&image(3, 1, 65, 64)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("96x64"), "{msg}");
}

#[test]
fn summary_matches_store_and_tape() {
    let m = tiny();
    let s = m.arch.summary(64, 64).unwrap();
    assert_eq!(s.total_params(), m.count_params());
    let mut tape = dsmyolo::tensor::Tape::inference();
    let mut ctx = dsmyolo::blocks::Ctx::new(
        &mut tape,
        &m.store,
        dsmyolo::tensor::kernels::NormMode::Infer,
    );
    let x = ctx.tape.constant(image(4, 1, 64, 64));
    m.arch.forward(&mut ctx, x).unwrap();
    assert_eq!(tape.flops(), s.total_flops());
    assert!(s.render().starts_with("summary v1\n"));
}

#[test]
fn conv_accounting_examples() {
    let mut store = ParamStore::<f32>::new();
    let pw = Conv2d::new(&mut Init::new(&mut store, 0), "pw", 8, 8, 1, 1, 1, true).unwrap();
    assert_eq!(store.num_params(), 72);
    assert_eq!(pw.num_params(), 72);

    let mut store = ParamStore::<f32>::new();
    let conv = Conv2d::new(&mut Init::new(&mut store, 0), "c", 8, 8, 3, 1, 1, false).unwrap();
    let mut s = Summary::default();
    conv.trace([1, 8, 16, 16], &mut s).unwrap();
    assert_eq!(s.total_flops(), 294_912);
    let mut s2 = Summary::default();
    conv.trace([1, 8, 32, 32], &mut s2).unwrap();
    assert_eq!(s2.total_flops(), 4 * s.total_flops());
}

#[test]
fn nano_stem_params() {
    let m = Model::<f32>::build(&ModelConfig::new(ScaleSpec::nano(3)), 0).unwrap();
    let s = m.arch.summary(640, 640).unwrap();
    // 3→8 conv+BN, 8→16 conv+BN
    assert_eq!(
        s.params_under("backbone.stem"),
        (3 * 8 * 9 + 16) + (8 * 16 * 9 + 32)
    );
    assert_eq!(m.arch.channels[0], 16);
    let stem_out = s
        .rows
        .iter()
        .rfind(|r| r.name.starts_with("backbone.stem"))
        .unwrap();
    assert_eq!(stem_out.out_shape, [1, 16, 160, 160]);
}

#[test]
fn checkpoint_roundtrip() {
    let mut m = tiny();
    m.store
        .buffer_mut("backbone.stem.0.bn.running_var")
        .unwrap()
        .data_mut()[0] = 2.5;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, dir.path()).unwrap();
    let back: Model<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.store, m.store);
    assert_eq!(back.arch.config, m.arch.config);
    assert!(load_checkpoint::<f64>(dir.path()).is_err());

    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("dsmyolo-checkpoint 1\n"));
    std::fs::write(
        dir.path().join("manifest.txt"),
        manifest.replace("dsmyolo-checkpoint 1", "dsmyolo-checkpoint 9"),
    )
    .unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}

fn random_maps(seed: u64, nc: usize, grids: [usize; 3]) -> HeadMaps<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HeadMaps {
        cls: grids
            .iter()
            .map(|&g| Tensor::rand_uniform(&[1, nc, g, g], -6.0, 6.0, &mut rng))
            .collect(),
        reg: grids
            .iter()
            .map(|&g| Tensor::rand_uniform(&[1, 4, g, g], 0.05, 3.0, &mut rng))
            .collect(),
        strides: [8, 16, 32],
    }
}

#[test]
fn decode_top1_is_global_argmax() {
    for seed in 0..20 {
        let maps = random_maps(seed, 3, [8, 4, 2]);
        let best = maps
            .cls
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        let d = decode(&maps, 0, 0.0, 1, (64, 64)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].score, sigmoid(best));
    }
}

#[test]
fn decoded_boxes_are_valid() {
    for seed in 0..10 {
        let maps = random_maps(seed, 2, [8, 4, 2]);
        let dets = decode(&maps, 0, 0.1, 1000, (64, 64)).unwrap();
        assert!(!dets.is_empty());
        for d in &dets {
            let b = d.bbox;
            assert!(b[2] > b[0] && b[3] > b[1]);
            assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 64.0 && b[3] <= 64.0);
            assert!(d.score.is_finite() && d.score >= 0.1);
        }
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let iou: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| box_iou(&dets[i].bbox, &dets[j].bbox))
                .collect()
        })
        .collect();
    let mut alive = vec![true; n];
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if dets[j].class == dets[i].class && iou[i][j] >= thr {
                alive[j] = false;
            }
        }
    }
    order
        .into_iter()
        .filter(|&i| alive[i])
        .map(|i| dets[i])
        .collect()
}

proptest! {
    #[test]
    fn nms_matches_all_pairs_oracle(seed in 0u64..10_000, n in 0usize..=32, thr in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
                let (w, h) = (rng.gen_range(2.0..30.0), rng.gen_range(2.0..30.0));
                Detection { bbox: [x, y, x + w, y + h], score: rng.gen_range(0.0..1.0), class: rng.gen_range(0..2) }
            })
            .collect();
        prop_assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
    }
}
