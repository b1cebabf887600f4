use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{EncoderSpec, Role, MLP_RATIO};
use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::numerics::{ltf, Element, Tensor};
use crate::rng::SplitMix64;

/// Named learnable tensors of one encoder, together with its spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<E: Element = f32> {
    pub spec: EncoderSpec,
    tensors: BTreeMap<String, Tensor<E>>,
}

/// Every parameter name and shape implied by a spec.
pub(crate) fn expected_shapes(spec: &EncoderSpec) -> BTreeMap<String, Vec<usize>> {
    let c = spec.dim;
    let hw = spec.grid() * spec.grid();
    let mut m = BTreeMap::new();
    let mut put = |k: String, s: &[usize]| {
        m.insert(k, s.to_vec());
    };
    put("patch.w".into(), &[spec.patch * spec.patch * 3, c]);
    put("patch.b".into(), &[c]);
    put("cls".into(), &[c]);
    put("pos".into(), &[hw, c]);
    for l in 0..spec.num_layers {
        for (k, shape) in block_shapes(&format!("blocks.{l}."), c) {
            put(k, &shape);
        }
    }
    put("norm.g".into(), &[c]);
    put("norm.b".into(), &[c]);
    if spec.role == Role::Student {
        if spec.temporal_layers {
            for l in 0..spec.num_layers {
                put(format!("temporal.{l}.w"), &[spec.temporal_kernel, c]);
            }
        }
        for i in 0..spec.stride_schedule.len() {
            for (axis, _) in spec.strided_axes(i) {
                put(down_name(i, axis), &[spec.temporal_kernel, c]);
            }
        }
        put("proj.w".into(), &[c, spec.distill_proj_dim.unwrap_or(c)]);
    }
    m
}

/// Names and shapes of one transformer block of width `c`.
pub(crate) fn block_shapes(prefix: &str, c: usize) -> Vec<(String, Vec<usize>)> {
    [
        ("ln1.g", vec![c]),
        ("ln1.b", vec![c]),
        ("qkv.w", vec![c, 3 * c]),
        ("qkv.b", vec![3 * c]),
        ("out.w", vec![c, c]),
        ("out.b", vec![c]),
        ("ln2.g", vec![c]),
        ("ln2.b", vec![c]),
        ("fc1.w", vec![c, MLP_RATIO * c]),
        ("fc1.b", vec![MLP_RATIO * c]),
        ("fc2.w", vec![MLP_RATIO * c, c]),
        ("fc2.b", vec![c]),
    ]
    .into_iter()
    .map(|(n, s)| (format!("{prefix}{n}"), s))
    .collect()
}

pub(crate) fn down_name(entry: usize, axis: usize) -> String {
    format!("down.{entry}.{}.w", ["t", "h", "w"][axis])
}

impl<E: Element> ModelParams<E> {
    /// Checks names and shapes against `spec`.
    pub fn new(spec: EncoderSpec, tensors: BTreeMap<String, Tensor<E>>) -> Result<Self> {
        spec.validate()?;
        let want = expected_shapes(&spec);
        for (name, shape) in &want {
            match tensors.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, spec implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(Self { spec, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<F: Element>(&self) -> ModelParams<F> {
        ModelParams {
            spec: self.spec.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl ModelParams<f32> {
    /// Writes `spec.cfg` and one LTF1 file per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.spec.to_kv();
        for (name, t) in &self.tensors {
            let file = format!("{name}.ltf");
            ltf::write(dir.join(&file), t)?;
            manifest.push_str(&format!("param.{name} = {file}\n"));
        }
        let path = dir.join("spec.cfg");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = ConfigFile::read(dir.join("spec.cfg"))?;
        let section = cfg.section("").cloned().unwrap_or_default();
        let role = section
            .entries
            .iter()
            .find(|e| e.key == "role")
            .map(|e| e.value.parse())
            .transpose()?
            .ok_or_else(|| Error::Config(format!("{}: no role", dir.display())))?;
        let mut r = cfg.reader("");
        let spec = EncoderSpec::from_reader(&mut r, role)?;
        let mut tensors = BTreeMap::new();
        for e in &section.entries {
            if let Some(name) = e.key.strip_prefix("param.") {
                r.raw(&e.key);
                tensors.insert(name.to_string(), ltf::read(dir.join(&e.value))?);
            }
        }
        r.finish()?;
        if let Some(s) = cfg.sections.get(1) {
            return Err(Error::Config(format!("{}: unexpected section [{}]", dir.display(), s.name)));
        }
        Self::new(spec, tensors)
    }
}

/// Orthonormal columns when `cols ≤ rows`. Otherwise orthogonal rows of
/// norm `sqrt(cols/rows)`, so columns have unit norm on average.
fn orthogonal(rows: usize, cols: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let (n, m) = if cols <= rows { (cols, rows) } else { (rows, cols) };
    // n orthonormal vectors of length m by Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    if cols <= rows {
        for (j, b) in basis.iter().enumerate() {
            for i in 0..rows {
                out[i * cols + j] = b[i];
            }
        }
    } else {
        // Orthonormal rows give columns of norm sqrt(rows/cols); rescale.
        let s = (cols as f64 / rows as f64).sqrt();
        for (i, b) in basis.iter().enumerate() {
            for j in 0..cols {
                out[i * cols + j] = b[j] * s;
            }
        }
    }
    out
}

/// Identity tap at the kernel centre.
fn identity_taps<E: Element>(k: usize, c: usize) -> Tensor<E> {
    Tensor::from_fn(&[k, c], |i| if i / c == k / 2 { E::one() } else { E::zero() })
}

/// Taps that average the `stride` inputs starting at the output's centre,
/// as far as the kernel reaches.
fn block_average_taps<E: Element>(k: usize, c: usize, stride: usize) -> Tensor<E> {
    let half = k / 2;
    let reach = stride.min(half + 1);
    Tensor::from_fn(&[k, c], |i| {
        let tap = i / c;
        if tap >= half && tap < half + reach {
            E::of(1.0 / reach as f64)
        } else {
            E::zero()
        }
    })
}

fn leading_identity<E: Element>(rows: usize, cols: usize) -> Tensor<E> {
    Tensor::from_fn(&[rows, cols], |i| if i / cols == i % cols { E::one() } else { E::zero() })
}

/// Seeded initialization. Projections are orthogonal with unit-norm
/// columns so features keep unit variance; residual output projections are
/// scaled by `1/sqrt(2L)`. Temporal kernels start as identity taps, strided
/// kernels as block averages and the distillation projection as a leading
/// identity.
pub fn init_params<E: Element>(spec: &EncoderSpec, seed: u64) -> Result<ModelParams<E>> {
    spec.validate()?;
    let mut rng = SplitMix64::new(seed);
    let c = spec.dim;
    let residual = 1.0 / ((2 * spec.num_layers) as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in expected_shapes(spec) {
        let t = if name == "cls" || name == "pos" {
            Tensor::from_fn(&shape, |_| E::of(rng.normal()))
        } else if name.starts_with("temporal.") {
            identity_taps(spec.temporal_kernel, c)
        } else if name.starts_with("down.") {
            let entry: usize = name.split('.').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            let axis = ["t", "h", "w"]
                .iter()
                .position(|a| name.split('.').nth(2) == Some(a))
                .unwrap_or(0);
            block_average_taps(spec.temporal_kernel, c, spec.stride_schedule[entry].stride[axis])
        } else if name == "proj.w" {
            leading_identity(shape[0], shape[1])
        } else {
            init_dense(&name, &shape, c, residual, &mut rng)?
        };
        tensors.insert(name, t);
    }
    ModelParams::new(spec.clone(), tensors)
}

/// Gains one, biases zero, packed QKV as three orthogonal blocks, other
/// matrices orthogonal; residual output projections scaled by `residual`.
pub(crate) fn init_dense<E: Element>(
    name: &str,
    shape: &[usize],
    c: usize,
    residual: f64,
    rng: &mut SplitMix64,
) -> Result<Tensor<E>> {
    let leaf = name.rsplit('.').next().unwrap_or("");
    Ok(if leaf == "g" {
        Tensor::full(shape, E::one())
    } else if leaf == "b" {
        Tensor::zeros(shape)
    } else if name.ends_with("qkv.w") {
        let blocks: Vec<Vec<f64>> = (0..3).map(|_| orthogonal(c, c, rng)).collect();
        Tensor::from_fn(shape, |i| {
            let (row, col) = (i / (3 * c), i % (3 * c));
            E::of(blocks[col / c][row * c + col % c])
        })
    } else {
        let scale = if name.ends_with("out.w") || name.ends_with("fc2.w") {
            residual
        } else {
            1.0
        };
        let w = orthogonal(shape[0], shape[1], rng);
        Tensor::new(shape, w.iter().map(|&x| E::of(x * scale)).collect())?
    })
}

fn leading_slice<E: Element>(t: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    match *t.shape() {
        [_] => Tensor::new(shape, t.data()[..shape[0]].to_vec()).expect("slice"),
        [_, cols] => Tensor::from_fn(shape, |i| t.data()[(i / shape[1]) * cols + i % shape[1]]),
        _ => unreachable!("parameters are rank 1 or 2"),
    }
}

/// Leading slice of a packed `[C, 3C]` (or `[3C]`) QKV tensor, taken from
/// each of the Q, K and V blocks separately.
fn qkv_slice<E: Element>(t: &Tensor<E>, big: usize, small: usize) -> Tensor<E> {
    let shape: Vec<usize> = if t.rank() == 2 { vec![small, 3 * small] } else { vec![3 * small] };
    Tensor::from_fn(&shape, |i| {
        let (r, col) = (i / (3 * small), i % (3 * small));
        let (blk, j) = (col / small, col % small);
        t.data()[r * 3 * big + blk * big + j]
    })
}

/// Student initialization from a larger teacher.
///
/// Student layer `ℓ` (1-based) copies teacher layer `round(ℓ·L_T/L_S)`,
/// each tensor cut to its leading rows and columns. Temporal kernels start
/// as identity taps, so a student without strides computes exactly the
/// sliced teacher.
pub fn init_student_from_teacher<E: Element>(
    teacher: &ModelParams<E>,
    student: &EncoderSpec,
) -> Result<ModelParams<E>> {
    let ts = &teacher.spec;
    if ts.role != Role::Teacher || student.role != Role::Student {
        return Err(Error::Config("init needs a teacher and a student spec".into()));
    }
    if student.dim > ts.dim || student.num_layers > ts.num_layers {
        return Err(Error::Config(format!(
            "student {}x{} is wider or deeper than teacher {}x{}",
            student.num_layers, student.dim, ts.num_layers, ts.dim
        )));
    }
    if student.patch != ts.patch || student.input_px != ts.input_px {
        return Err(Error::Config("student and teacher patching differ".into()));
    }
    let mut out = init_params::<E>(student, 0)?;
    let (lt, ls) = (ts.num_layers, student.num_layers);
    let shapes = expected_shapes(student);
    for (name, shape) in &shapes {
        let src_name = if let Some(rest) = name.strip_prefix("blocks.") {
            let (l, tail) = rest.split_once('.').expect("blocks.<l>.<name>");
            let l: usize = l.parse().expect("layer index");
            // 1-based ℓ → 1-based teacher layer, rounded half up.
            let src = (2 * (l + 1) * lt + ls) / (2 * ls);
            format!("blocks.{}.{tail}", src - 1)
        } else {
            name.clone()
        };
        let Some(src) = teacher.get(&src_name) else {
            continue; // temporal, strided and projection tensors keep their init
        };
        let t = if name.ends_with("qkv.w") || name.ends_with("qkv.b") {
            qkv_slice(src, ts.dim, student.dim)
        } else {
            leading_slice(src, shape)
        };
        *out.get_mut(name).expect("same names") = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut specs = vec![EncoderSpec::desk_teacher(), EncoderSpec::desk_student()];
        let mut s = EncoderSpec::desk_student();
        s.temporal_layers = false;
        s.stride_schedule[0].stride = [1, 2, 2];
        s.stride_schedule[1].stride = [1, 2, 2];
        specs.push(s);
        for spec in specs {
            let p = init_params::<f32>(&spec, 1).unwrap();
            assert_eq!(p.num_params(), spec.param_count(), "{spec:?}");
        }
        // Hand count for one tiny teacher layer: C=4, patch 2, 4px.
        let tiny = EncoderSpec {
            role: Role::Teacher,
            num_layers: 1,
            dim: 4,
            heads: 1,
            patch: 2,
            input_px: 4,
            temporal_kernel: 3,
            temporal_layers: false,
            stride_schedule: vec![],
            distill_proj_dim: None,
        };
        // patch 12·4+4, cls 4, pos 4·4, block 12·16+13·4, norm 8
        assert_eq!(tiny.param_count(), 52 + 4 + 16 + 244 + 8);
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut r = SplitMix64::new(3);
        for (rows, cols) in [(8, 8), (8, 3)] {
            let w = orthogonal(rows, cols, &mut r);
            for a in 0..cols {
                for b in 0..cols {
                    let d: f64 = (0..rows).map(|i| w[i * cols + a] * w[i * cols + b]).sum();
                    assert!((d - f64::from(a == b)).abs() < 1e-9);
                }
            }
        }
        let w = orthogonal(3, 8, &mut r);
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..8).map(|j| w[a * 8 + j] * w[b * 8 + j]).sum();
                let want = if a == b { 8.0 / 3.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_slice_copies_teacher_weights() {
        let t = init_params::<f32>(&EncoderSpec::desk_teacher(), 5).unwrap();
        let mut s = EncoderSpec::desk_teacher();
        s.role = Role::Student;
        s.distill_proj_dim = Some(48);
        let st = init_student_from_teacher(&t, &s).unwrap();
        for (name, v) in t.iter() {
            assert_eq!(st.get(name), Some(v), "{name}");
        }
    }

    #[test]
    fn slices_are_leading_blocks_of_selected_layers() {
        let t = init_params::<f32>(&EncoderSpec::desk_teacher(), 5).unwrap();
        let s = EncoderSpec::desk_student();
        let st = init_student_from_teacher(&t, &s).unwrap();
        // 8 teacher layers onto 6: ℓ=2 takes round(2.67) = teacher layer 3.
        let tw = t.get("blocks.2.fc1.w").unwrap();
        let sw = st.get("blocks.1.fc1.w").unwrap();
        for i in 0..32 {
            for j in 0..128 {
                assert_eq!(sw.at(&[i, j]), tw.at(&[i, j]));
            }
        }
        let tq = t.get("blocks.7.qkv.w").unwrap();
        let sq = st.get("blocks.5.qkv.w").unwrap();
        for i in 0..32 {
            for blk in 0..3 {
                for j in 0..32 {
                    assert_eq!(sq.at(&[i, blk * 32 + j]), tq.at(&[i, blk * 48 + j]));
                }
            }
        }
        let p = st.get("proj.w").unwrap();
        assert_eq!(p.at(&[3, 3]), 1.0);
        assert_eq!(p.at(&[3, 4]), 0.0);
    }

    #[test]
    fn wider_or_deeper_students_are_rejected() {
        let t = init_params::<f32>(&EncoderSpec::desk_teacher(), 5).unwrap();
        let mut s = EncoderSpec::desk_student();
        s.dim = 64;
        s.distill_proj_dim = Some(48);
        assert!(matches!(init_student_from_teacher(&t, &s), Err(Error::Config(_))));
        let mut s = EncoderSpec::desk_student();
        s.num_layers = 9;
        assert!(matches!(init_student_from_teacher(&t, &s), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params::<f32>(&EncoderSpec::desk_student(), 9).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(ModelParams::load(dir.path()).unwrap(), p);
        std::fs::remove_file(dir.path().join("cls.ltf")).unwrap();
        assert!(ModelParams::load(dir.path()).is_err());
    }
}
