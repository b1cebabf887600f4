use litetok::encoder::{
    init_params, init_student_from_teacher, patch_embed, spatial_attention_block, student_forward,
    teacher_forward, EncoderSpec, Forward, ModelParams, ParamVars, Role, StrideEntry,
};
use litetok::numerics::{finite_difference_check, Coords, Tape, Tensor};
use litetok::rng::SplitMix64;
use litetok::Error;
use proptest::prelude::*;

mod common;
use common::{affine, block_oracle, ln};

fn clip<E: litetok::numerics::Element>(t: usize, px: usize, seed: u64) -> Tensor<E> {
    let mut r = SplitMix64::new(seed);
    Tensor::from_fn(&[t, px, px, 3], |_| E::of(r.uniform()))
}

fn tiny(role: Role, layers: usize, dim: usize, px: usize) -> EncoderSpec {
    EncoderSpec {
        role,
        num_layers: layers,
        dim,
        heads: 2,
        patch: 2,
        input_px: px,
        temporal_kernel: 3,
        temporal_layers: role == Role::Student,
        stride_schedule: vec![],
        distill_proj_dim: (role == Role::Student).then_some(dim + 2),
    }
}

/// Replaces every parameter with seeded noise so identity initializations
/// do not hide bugs.
fn randomize(p: &mut ModelParams<f64>, seed: u64, scale: f64) {
    let mut r = SplitMix64::new(seed);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * r.normal());
    }
}

#[test]
fn patch_embedding_counts_and_zero_image() {
    let spec = EncoderSpec::desk_teacher();
    let p = init_params::<f32>(&spec, 1).unwrap();
    let fm = patch_embed(&clip(3, 32, 0), &p).unwrap();
    assert_eq!(fm.tokens().shape(), &[3, 8, 8, 48]);
    assert_eq!(fm.cls().shape(), &[3, 48]);

    let zero = patch_embed(&Tensor::zeros(&[2, 32, 32, 3]), &p).unwrap();
    let pos = p.get("pos").unwrap();
    for f in 0..2 {
        assert_eq!(&zero.tokens().data()[f * 64 * 48..(f + 1) * 64 * 48], pos.data());
    }
    assert!(matches!(patch_embed(&clip(1, 28, 0), &p), Err(Error::Shape(_))));
}

#[test]
fn a_pixel_touches_exactly_one_patch() {
    let spec = EncoderSpec::desk_teacher();
    let p = init_params::<f32>(&spec, 1).unwrap();
    let base = patch_embed(&Tensor::zeros(&[1, 32, 32, 3]), &p).unwrap();
    for (y, x, token) in [(1usize, 2usize, 0usize), (1, 6, 1), (13, 30, 3 * 8 + 7)] {
        let mut img = Tensor::<f32>::zeros(&[1, 32, 32, 3]);
        for ch in 0..3 {
            let o = img.offset(&[0, y, x, ch]);
            img.data_mut()[o] = 1.0;
        }
        let fm = patch_embed(&img, &p).unwrap();
        let changed: Vec<usize> = (0..64)
            .filter(|&k| fm.tokens().data()[k * 48..(k + 1) * 48] != base.tokens().data()[k * 48..(k + 1) * 48])
            .collect();
        assert_eq!(changed, vec![token]);
    }
}

#[test]
fn spatial_block_matches_attention_formula_on_two_tokens() {
    // One patch per frame: the class token and that patch make two tokens.
    let spec = tiny(Role::Teacher, 1, 4, 2);
    let mut p = init_params::<f64>(&spec, 3).unwrap();
    randomize(&mut p, 4, 0.3);
    let fm = patch_embed(&clip(2, 2, 5), &p).unwrap();
    let out = spatial_attention_block(&fm, &p, 0).unwrap();
    assert_eq!(out.tokens().shape(), fm.tokens().shape());
    for f in 0..2 {
        let toks = vec![
            fm.cls().data()[f * 4..(f + 1) * 4].to_vec(),
            fm.tokens().data()[f * 4..(f + 1) * 4].to_vec(),
        ];
        let want = block_oracle(&toks, |n| p.get(&format!("blocks.0.{n}")).unwrap(), 2);
        for k in 0..4 {
            assert!((out.cls().at(&[f, k]) - want[0][k]).abs() < 1e-5);
            assert!((out.tokens().at(&[f, 0, 0, k]) - want[1][k]).abs() < 1e-5);
        }
    }
}

#[test]
fn spatial_block_matches_oracle_on_a_full_frame() {
    let spec = tiny(Role::Teacher, 2, 8, 6);
    let mut p = init_params::<f64>(&spec, 3).unwrap();
    randomize(&mut p, 8, 0.2);
    let fm = patch_embed(&clip(1, 6, 5), &p).unwrap();
    let out = spatial_attention_block(&fm, &p, 1).unwrap();
    let mut toks = vec![fm.cls().data().to_vec()];
    toks.extend(fm.tokens().data().chunks(8).map(<[f64]>::to_vec));
    let want = block_oracle(&toks, |n| p.get(&format!("blocks.1.{n}")).unwrap(), 2);
    assert!(out.cls().data().iter().zip(&want[0]).all(|(a, b)| (a - b).abs() < 1e-5));
    for (k, row) in out.tokens().data().chunks(8).enumerate() {
        assert!(row.iter().zip(&want[k + 1]).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}

#[test]
fn teacher_is_deterministic_dense_and_frame_wise() {
    let spec = EncoderSpec::desk_teacher();
    let p = init_params::<f32>(&spec, 11).unwrap();
    let x = clip::<f32>(3, 32, 1);
    let a = teacher_forward(&x, &p).unwrap();
    let b = teacher_forward(&x, &p).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens().shape(), &[3, 8, 8, 48]);

    let mut y = x.clone();
    let frame = 32 * 32 * 3;
    y.data_mut()[frame..2 * frame].iter_mut().for_each(|v| *v = 1.0 - *v);
    let c = teacher_forward(&y, &p).unwrap();
    let per = 64 * 48;
    assert_eq!(a.tokens().data()[..per], c.tokens().data()[..per]);
    assert_eq!(a.tokens().data()[2 * per..], c.tokens().data()[2 * per..]);
    assert_ne!(a.tokens().data()[per..2 * per], c.tokens().data()[per..2 * per]);
    assert_eq!(a.cls().data()[..48], c.cls().data()[..48]);
}

#[test]
fn desk_student_emits_sixteen_tokens_from_two_hundred_fifty_six() {
    let spec = EncoderSpec::desk_student();
    let p = init_params::<f32>(&spec, 2).unwrap();
    let out = student_forward(&clip(4, 32, 3), &p).unwrap();
    assert_eq!(out.features.tokens().shape(), &[1, 4, 4, 32]);
    assert_eq!(out.distill.shape(), &[16, 48]);
    assert!(matches!(student_forward(&clip::<f32>(3, 32, 3), &p), Err(Error::Shape(_))));
    let t = init_params::<f32>(&EncoderSpec::desk_teacher(), 2).unwrap();
    assert!(matches!(student_forward(&clip::<f32>(4, 32, 3), &t), Err(Error::Config(_))));
    assert!(matches!(teacher_forward(&clip::<f32>(4, 32, 3), &p), Err(Error::Config(_))));
}

#[test]
fn student_mixes_time_and_spatial_only_variant_does_not() {
    let mut spec = tiny(Role::Student, 2, 8, 8);
    let mut p = init_params::<f64>(&spec, 1).unwrap();
    randomize(&mut p, 2, 0.2);
    let x = clip::<f64>(4, 8, 3);
    let mut y = x.clone();
    y.data_mut()[..8 * 8 * 3].iter_mut().for_each(|v| *v = 0.5);
    let a = student_forward(&x, &p).unwrap();
    let b = student_forward(&y, &p).unwrap();
    let per = 16 * 8;
    // Frame 2 is two taps from frame 0: out of reach for one layer, not for two.
    assert_ne!(a.features.tokens().data()[2 * per..3 * per], b.features.tokens().data()[2 * per..3 * per]);

    spec.temporal_layers = false;
    spec.stride_schedule = vec![
        StrideEntry { after_layer: 1, stride: [1, 2, 2] },
    ];
    let mut p = init_params::<f64>(&spec, 1).unwrap();
    randomize(&mut p, 2, 0.2);
    let a = student_forward(&x, &p).unwrap();
    let b = student_forward(&y, &p).unwrap();
    let per = 4 * 8;
    assert_eq!(a.features.tokens().shape(), &[4, 2, 2, 8]);
    assert_ne!(a.features.tokens().data()[..per], b.features.tokens().data()[..per]);
    assert_eq!(a.features.tokens().data()[per..], b.features.tokens().data()[per..]);
}

fn conv_time(x: &[Vec<f64>], k: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (t, c) = (x.len(), x[0].len());
    let taps = k.shape()[0] as isize;
    (0..t)
        .map(|o| {
            (0..c)
                .map(|ch| {
                    (0..taps)
                        .map(|j| {
                            let mut i = o as isize + j - taps / 2;
                            if i < 0 {
                                i = -i;
                            }
                            if i >= t as isize {
                                i = 2 * (t as isize - 1) - i;
                            }
                            k.at(&[j as usize, ch]) * x[i as usize][ch]
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[test]
fn one_layer_student_matches_stepwise_composition() {
    let spec = tiny(Role::Student, 1, 6, 4);
    let mut p = init_params::<f64>(&spec, 1).unwrap();
    randomize(&mut p, 9, 0.3);
    let x = clip::<f64>(3, 4, 4);
    let got = student_forward(&x, &p).unwrap();

    let fm = spatial_attention_block(&patch_embed(&x, &p).unwrap(), &p, 0).unwrap();
    let k = p.get("temporal.0.w").unwrap();
    let (g, b) = (p.get("norm.g").unwrap().data(), p.get("norm.b").unwrap().data());
    let proj = p.get("proj.w").unwrap();
    let cls: Vec<Vec<f64>> = fm.cls().data().chunks(6).map(<[f64]>::to_vec).collect();
    let cls = conv_time(&cls, k);
    for (f, row) in cls.iter().enumerate() {
        let want = ln(row, g, b);
        for ch in 0..6 {
            assert!((got.features.cls().at(&[f, ch]) - want[ch]).abs() < 1e-5);
        }
    }
    for pos in 0..4 {
        let series: Vec<Vec<f64>> = (0..3)
            .map(|f| fm.tokens().data()[(f * 4 + pos) * 6..][..6].to_vec())
            .collect();
        for (f, row) in conv_time(&series, k).iter().enumerate() {
            let normed = ln(row, g, b);
            let d = affine(&normed, proj, &[0.0; 8]);
            let n = f * 4 + pos;
            for ch in 0..6 {
                assert!((got.features.tokens().data()[n * 6 + ch] - normed[ch]).abs() < 1e-5);
            }
            for j in 0..8 {
                assert!((got.distill.at(&[n, j]) - d[j]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn fresh_student_without_strides_is_the_sliced_teacher() {
    let teacher = init_params::<f32>(&EncoderSpec::desk_teacher(), 21).unwrap();
    let mut spec = EncoderSpec::desk_student();
    spec.stride_schedule.clear();
    let student = init_student_from_teacher(&teacher, &spec).unwrap();

    let mut sliced_spec = spec.clone();
    sliced_spec.role = Role::Teacher;
    sliced_spec.temporal_layers = false;
    sliced_spec.distill_proj_dim = None;
    let sliced: std::collections::BTreeMap<_, _> = student
        .iter()
        .filter(|(k, _)| !k.starts_with("temporal.") && *k != "proj.w")
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let sliced = ModelParams::new(sliced_spec, sliced).unwrap();

    let x = clip::<f32>(4, 32, 8);
    let s = student_forward(&x, &student).unwrap();
    let t = teacher_forward(&x, &sliced).unwrap();
    assert!(s.features.tokens().max_abs_diff(t.tokens()).unwrap() < 1e-5);
    assert!(s.features.cls().max_abs_diff(t.cls()).unwrap() < 1e-5);
}

#[test]
fn gradients_flow_end_to_end() {
    let mut spec = tiny(Role::Student, 2, 4, 4);
    spec.stride_schedule = vec![StrideEntry { after_layer: 1, stride: [2, 2, 1] }];
    let mut p = init_params::<f64>(&spec, 1).unwrap();
    randomize(&mut p, 3, 0.2);
    let names: Vec<String> = p.names().cloned().collect();
    let tensors: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
    let x = clip::<f64>(2, 4, 5);
    let mut r = SplitMix64::new(6);
    let target = Tensor::from_fn(&[2, 6], |_| r.normal());
    let report = finite_difference_check(
        |tape: &Tape<f64>, vars| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().cloned()));
            let f = Forward { tape, spec: &spec, vars: &pv };
            let out = f.student(&x)?;
            tape.mse(&out.distill, &tape.constant(target.clone()))
        },
        &tensors,
        1e-3,
        Coords::Sample { count: 200, seed: 7 },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn output_count_times_ratio_is_input_count(
        st in prop::collection::vec((1usize..3, 1usize..3, 1usize..3), 0..3),
        extra_t in 1usize..3,
    ) {
        let mut spec = tiny(Role::Student, 4, 4, 16);
        spec.stride_schedule = st
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c))| StrideEntry { after_layer: i + 1, stride: [a, b, c] })
            .collect();
        let frames = spec.total_stride()[0] * extra_t;
        let p = init_params::<f32>(&spec, 1).unwrap();
        let out = student_forward(&clip::<f32>(frames, 16, 1), &p).unwrap();
        let n_out = out.distill.shape()[0];
        prop_assert_eq!(n_out * spec.ratio(), frames * 64);
    }
}
