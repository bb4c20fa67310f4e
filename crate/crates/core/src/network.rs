//! Siamese difference network.
//!
//! A shared encoder (7x7 stem, three residual stages) runs on both temporal
//! images. Optional DDR layers follow stages 1 and 2. Per-level absolute
//! feature differences are resized to the input size, concatenated and
//! projected by a 1x1 convolution followed by a sigmoid.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::ddr::{self, DdrVariant, MomentsMode, NormConfig, RunningMoments};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Regularizer of the encoder's batch normalization layers.
pub const BN_EPS: f64 = 1e-5;

/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub norm: NormConfig,
}

impl NetConfig {
    pub fn full(norm: NormConfig) -> Self {
        NetConfig {
            in_channels: 3,
            widths: [64, 128, 256],
            blocks_per_stage: 2,
            norm,
        }
    }

    /// Reduced widths and depth for fast tests.
    pub fn tiny(norm: NormConfig) -> Self {
        NetConfig {
            in_channels: 3,
            widths: [8, 16, 32],
            blocks_per_stage: 1,
            norm,
        }
    }

    pub fn aggregate_channels(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::invalid("net_config", "channel counts and depth must be positive"));
        }
        self.norm.validate()
    }
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    moments: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv1: usize,
    bn1: Bn,
    conv2: usize,
    bn2: Bn,
    proj: Option<(usize, Bn)>,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: usize,
    stem_bn: Bn,
    stages: Vec<Vec<Block>>,
    ddr: Vec<usize>,
    head_w: usize,
    head_b: usize,
}

/// Parameters of one network, registered on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

pub struct ForwardOutput {
    pub f_a: [Var; 3],
    pub f_b: [Var; 3],
    pub diff_levels: [Var; 3],
    pub f_agg: Var,
    pub p_out: Var,
}

#[derive(Clone, Debug)]
pub struct SdNetwork<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    moments: Vec<RunningMoments<T>>,
    moment_names: Vec<String>,
    layout: Layout,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    moments: Vec<RunningMoments<T>>,
    moment_names: Vec<String>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> usize {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(dist.sample(self.rng)));
        self.params.add(format!("{name}.weight"), t)
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        Bn {
            gamma,
            beta,
            moments: self.moments(name, MomentsMode::Diagonal, c),
        }
    }

    fn moments(&mut self, name: &str, mode: MomentsMode, c: usize) -> usize {
        self.moments.push(RunningMoments::new(mode, c));
        self.moment_names.push(name.to_string());
        self.moments.len() - 1
    }
}

impl<T: Real> SdNetwork<T> {
    /// He-normal convolution weights, unit BN scales, zero shifts and head bias.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            moments: Vec::new(),
            moment_names: Vec::new(),
            rng: &mut rng,
        };
        let w = config.widths;
        let stem = b.conv("stem.conv", w[0], config.in_channels, 7);
        let stem_bn = b.bn("stem.bn", w[0]);
        let mut stages = Vec::new();
        let mut cin = w[0];
        for (s, &cout) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for k in 0..config.blocks_per_stage {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let p = format!("stage{}.block{k}", s + 1);
                let conv1 = b.conv(&format!("{p}.conv1"), cout, cin, 3);
                let bn1 = b.bn(&format!("{p}.bn1"), cout);
                let conv2 = b.conv(&format!("{p}.conv2"), cout, cout, 3);
                let bn2 = b.bn(&format!("{p}.bn2"), cout);
                let proj = (stride != 1 || cin != cout).then(|| {
                    let c = b.conv(&format!("{p}.proj"), cout, cin, 1);
                    (c, b.bn(&format!("{p}.proj_bn"), cout))
                });
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    proj,
                    stride,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        let ddr = match config.norm.variant {
            DdrVariant::None => Vec::new(),
            v => {
                let mode = if v == DdrVariant::Gln {
                    MomentsMode::Diagonal
                } else {
                    MomentsMode::Full
                };
                (0..2)
                    .map(|s| b.moments(&format!("ddr{}", s + 1), mode, w[s]))
                    .collect()
            }
        };
        let agg = config.aggregate_channels();
        let dist = Normal::new(0.0, (1.0 / agg as f64).sqrt()).expect("positive std");
        let head = Tensor::from_fn(&[1, agg, 1, 1], |_| T::lit(dist.sample(b.rng)));
        let head_w = b.params.add("head.weight", head);
        let head_b = b.params.add("head.bias", Tensor::zeros(&[1]));
        Ok(SdNetwork {
            config,
            params: b.params,
            moments: b.moments,
            moment_names: b.moment_names,
            layout: Layout {
                stem,
                stem_bn,
                stages,
                ddr,
                head_w,
                head_b,
            },
        })
    }

    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound((0..self.params.len()).map(|s| self.params.bind(tape, s)).collect())
    }

    pub fn head_bias_slot(&self) -> usize {
        self.layout.head_b
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &RunningMoments<T>)> {
        self.moment_names.iter().map(String::as_str).zip(&self.moments)
    }

    fn bn(&mut self, tape: &Tape<T>, p: &Bound, x: Var, l: Bn, training: bool) -> Result<Var> {
        let y = ddr::bn_forward(tape, x, &mut self.moments[l.moments], training, BN_EPS)?;
        tape.channel_affine(y, p.0[l.gamma], p.0[l.beta])
    }

    fn block(&mut self, tape: &Tape<T>, p: &Bound, x: Var, b: Block, training: bool) -> Result<Var> {
        let y = tape.conv2d(x, p.0[b.conv1], None, b.stride, 1)?;
        let y = self.bn(tape, p, y, b.bn1, training)?;
        let y = tape.relu(y)?;
        let y = tape.conv2d(y, p.0[b.conv2], None, 1, 1)?;
        let y = self.bn(tape, p, y, b.bn2, training)?;
        let skip = match b.proj {
            Some((conv, bn)) => {
                let s = tape.conv2d(x, p.0[conv], None, b.stride, 0)?;
                self.bn(tape, p, s, bn, training)?
            }
            None => x,
        };
        let y = tape.add(y, skip)?;
        tape.relu(y)
    }

    /// Features at strides 4, 8 and 16, DDR applied to the first two.
    pub fn encode(&mut self, tape: &Tape<T>, p: &Bound, x: Var, training: bool) -> Result<[Var; 3]> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::invalid(
                "encode",
                format!("expected {} input channels, got {c}", self.config.in_channels),
            ));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "encode",
                format!("input {h}x{w} is not a multiple of {SIZE_MULTIPLE}; pad the images"),
            ));
        }
        let layout = self.layout.clone();
        let y = tape.conv2d(x, p.0[layout.stem], None, 2, 3)?;
        let y = self.bn(tape, p, y, layout.stem_bn, training)?;
        let y = tape.relu(y)?;
        let mut y = tape.maxpool2(y)?;
        let mut levels = Vec::with_capacity(3);
        let norm = self.config.norm.clone();
        for (s, blocks) in layout.stages.iter().enumerate() {
            for &b in blocks {
                y = self.block(tape, p, y, b, training)?;
            }
            if let Some(&m) = layout.ddr.get(s) {
                let rm = &mut self.moments[m];
                y = match norm.variant {
                    DdrVariant::Gln => ddr::gln(tape, y, rm, &norm, training)?,
                    DdrVariant::Glw => ddr::glw(tape, y, rm, &norm, training)?,
                    DdrVariant::None => y,
                };
            }
            levels.push(y);
        }
        Ok([levels[0], levels[1], levels[2]])
    }

    /// Sigmoid of the 1x1 head projection.
    pub fn predict(&self, tape: &Tape<T>, p: &Bound, f_agg: Var) -> Result<Var> {
        let c = tape.value(f_agg).dims4()?.1;
        if c != self.config.aggregate_channels() {
            return Err(Error::invalid(
                "predict",
                format!("expected {} channels, got {c}", self.config.aggregate_channels()),
            ));
        }
        let z = tape.conv2d(f_agg, p.0[self.layout.head_w], Some(p.0[self.layout.head_b]), 1, 0)?;
        tape.sigmoid(z)
    }

    /// Both branches share `p`; each branch normalizes with its own batch
    /// statistics in training mode.
    pub fn forward_pair(
        &mut self,
        tape: &Tape<T>,
        p: &Bound,
        xa: Var,
        xb: Var,
        training: bool,
    ) -> Result<ForwardOutput> {
        let sa = tape.shape(xa);
        let sb = tape.shape(xb);
        if sa != sb {
            return Err(Error::shape("forward_pair", &sa, &sb));
        }
        let f_a = self.encode(tape, p, xa, training)?;
        let f_b = self.encode(tape, p, xb, training)?;
        let diff_levels = diff_features(tape, &f_a, &f_b)?;
        let f_agg = aggregate(tape, &diff_levels, sa[2], sa[3])?;
        let p_out = self.predict(tape, p, f_agg)?;
        Ok(ForwardOutput {
            f_a,
            f_b,
            diff_levels,
            f_agg,
            p_out,
        })
    }

    /// Evaluation-mode probability map `N x 1 x H x W`.
    pub fn infer(&mut self, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape);
        let a = tape.constant(xa.clone());
        let b = tape.constant(xb.clone());
        let out = self.forward_pair(&tape, &p, a, b, false)?;
        let v = tape.value(out.p_out);
        Ok((*v).clone())
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, m) in self.moments() {
            let c = m.channels;
            out.push((format!("{name}.running_mean"), Tensor::new(&[c], m.mean.clone()).expect("sized")));
            let (suffix, shape) = match m.mode {
                MomentsMode::Diagonal => ("running_var", vec![c]),
                MomentsMode::Full => ("running_cov", vec![c, c]),
            };
            out.push((format!("{name}.{suffix}"), Tensor::new(&shape, m.second.clone()).expect("sized")));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        let buffers = self.buffers();
        let entries: Vec<(&str, &Tensor<T>)> = self
            .params
            .iter()
            .chain(buffers.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(8, format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let config: NetConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.error(at, format!("config: {e}")))?;
        let mut net = SdNetwork::new(config, 0)?;
        let count = r.u32()? as usize;
        let mut seen = vec![false; net.params.len() + 2 * net.moments.len()];
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error(at, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<T> = r
                .take(n.checked_mul(4).ok_or_else(|| r.error(at, "entry too large"))?)?
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let idx = net.restore(&name, &shape, data).map_err(|m| r.error(at, m))?;
            seen[idx] = true;
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes"));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(r.error(r.pos, format!("missing entry #{missing}")));
        }
        Ok(net)
    }

    fn restore(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> std::result::Result<usize, String> {
        if let Some(slot) = self.params.slot_of(name) {
            let t = self.params.tensor_mut(slot);
            if t.shape() != shape {
                return Err(format!("`{name}` has shape {shape:?}, expected {:?}", t.shape()));
            }
            t.data_mut().copy_from_slice(&data);
            return Ok(slot);
        }
        let (layer, field) = name
            .rsplit_once('.')
            .ok_or_else(|| format!("unknown entry `{name}`"))?;
        let m = self
            .moment_names
            .iter()
            .position(|n| n == layer)
            .ok_or_else(|| format!("unknown entry `{name}`"))?;
        let rm = &mut self.moments[m];
        let (target, k) = match field {
            "running_mean" => (&mut rm.mean, 0),
            "running_var" | "running_cov" => (&mut rm.second, 1),
            _ => return Err(format!("unknown entry `{name}`")),
        };
        if target.len() != data.len() {
            return Err(format!("`{name}` has {} values, expected {}", data.len(), target.len()));
        }
        *target = data;
        Ok(self.params.len() + 2 * m + k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CHGNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `|f_a - f_b|` per level.
pub fn diff_features<T: Real>(tape: &Tape<T>, fa: &[Var; 3], fb: &[Var; 3]) -> Result<[Var; 3]> {
    let mut out = [fa[0]; 3];
    for i in 0..3 {
        let d = tape.sub(fa[i], fb[i])?;
        out[i] = tape.abs(d)?;
    }
    Ok(out)
}

/// Resizes each level to `h x w` and stacks them along channels.
pub fn aggregate<T: Real>(tape: &Tape<T>, diffs: &[Var; 3], h: usize, w: usize) -> Result<Var> {
    let resized = diffs
        .iter()
        .map(|&d| tape.bilinear_resize(d, h, w))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_channels(&resized)
}

/// Whether weight decay applies to a parameter.
pub fn is_conv_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn norm(variant: DdrVariant) -> NormConfig {
        NormConfig {
            variant,
            ..NormConfig::default()
        }
    }

    fn images(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, s, s], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn level_shapes_full_width() {
        let mut net = SdNetwork::<f32>::new(NetConfig::full(norm(DdrVariant::None)), 1).unwrap();
        let tape = Tape::new();
        let p = net.bind(&tape);
        let x = tape.constant(images(2, 64, 1).cast());
        let f = net.encode(&tape, &p, x, true).unwrap();
        assert_eq!(tape.shape(f[0]), vec![2, 64, 16, 16]);
        assert_eq!(tape.shape(f[1]), vec![2, 128, 8, 8]);
        assert_eq!(tape.shape(f[2]), vec![2, 256, 4, 4]);
        assert_eq!(net.config.aggregate_channels(), 448);
    }

    #[test]
    fn ddr_variants_preserve_shapes() {
        for v in [DdrVariant::Gln, DdrVariant::Glw] {
            let mut net = SdNetwork::<f64>::new(NetConfig::tiny(norm(v)), 2).unwrap();
            let tape = Tape::new();
            let p = net.bind(&tape);
            let x = tape.constant(images(2, 32, 2));
            let f = net.encode(&tape, &p, x, true).unwrap();
            assert_eq!(tape.shape(f[0]), vec![2, 8, 8, 8]);
            assert_eq!(tape.shape(f[2]), vec![2, 32, 2, 2]);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut net = SdNetwork::<f64>::new(NetConfig::tiny(norm(DdrVariant::None)), 3).unwrap();
        let tape = Tape::new();
        let p = net.bind(&tape);
        let x = tape.constant(images(2, 40, 3));
        let err = net.encode(&tape, &p, x, true).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn identical_inputs_give_constant_sigmoid_of_bias() {
        let mut net = SdNetwork::<f64>::new(NetConfig::tiny(norm(DdrVariant::Glw)), 4).unwrap();
        let slot = net.head_bias_slot();
        net.params.tensor_mut(slot).data_mut()[0] = -1.3;
        let x = images(2, 32, 4);
        let out = net.infer(&x, &x).unwrap();
        assert_eq!(out.shape(), &[2, 1, 32, 32]);
        let want = 1.0 / (1.0 + 1.3f64.exp());
        assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn swap_symmetry_and_range() {
        let mut net = SdNetwork::<f64>::new(NetConfig::tiny(norm(DdrVariant::Gln)), 5).unwrap();
        let a = images(2, 32, 5);
        let b = images(2, 32, 6);
        let ab = net.infer(&a, &b).unwrap();
        let ba = net.infer(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn head_bias_is_monotone() {
        let mut net = SdNetwork::<f64>::new(NetConfig::tiny(norm(DdrVariant::None)), 6).unwrap();
        let a = images(2, 32, 7);
        let b = images(2, 32, 8);
        let lo = net.infer(&a, &b).unwrap();
        let slot = net.head_bias_slot();
        net.params.tensor_mut(slot).data_mut()[0] += 0.5;
        let hi = net.infer(&a, &b).unwrap();
        assert!(lo.data().iter().zip(hi.data()).all(|(l, h)| h > l));
    }

    #[test]
    fn diff_and_aggregate_basics() {
        let tape = Tape::<f64>::new();
        let fa = [
            tape.constant(images(1, 8, 1)),
            tape.constant(images(1, 4, 2)),
            tape.constant(images(1, 2, 3)),
        ];
        let zero = [
            tape.constant(Tensor::zeros(&[1, 3, 8, 8])),
            tape.constant(Tensor::zeros(&[1, 3, 4, 4])),
            tape.constant(Tensor::zeros(&[1, 3, 2, 2])),
        ];
        let same = diff_features(&tape, &fa, &fa).unwrap();
        assert!(same.iter().all(|&d| tape.value(d).data().iter().all(|&v| v == 0.0)));
        let d1 = diff_features(&tape, &fa, &zero).unwrap();
        let d2 = diff_features(&tape, &zero, &fa).unwrap();
        for i in 0..3 {
            assert_eq!(*tape.value(d1[i]), *tape.value(d2[i]));
            assert_eq!(*tape.value(d1[i]), *tape.value(fa[i]));
        }
        let agg = aggregate(&tape, &d1, 8, 8).unwrap();
        assert_eq!(tape.shape(agg), vec![1, 9, 8, 8]);
        let first = tape.slice_channels(agg, 0, 3).unwrap();
        assert_eq!(*tape.value(first), *tape.value(fa[0]));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = SdNetwork::<f32>::new(NetConfig::tiny(norm(DdrVariant::Glw)), 9).unwrap();
        // Move the running buffers away from their initial values.
        let tape = Tape::new();
        let p = net.bind(&tape);
        let x = tape.constant(images(2, 32, 9).cast());
        let y = tape.constant(images(2, 32, 10).cast());
        net.forward_pair(&tape, &p, x, y, true).unwrap();
        let bytes = net.to_bytes();
        let back = SdNetwork::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, net.config);
        for ((_, a), (_, b)) in back.params.iter().zip(net.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
        for ((_, a), (_, b)) in back.moments().zip(net.moments()) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.second, b.second);
        }
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let net = SdNetwork::<f32>::new(NetConfig::tiny(norm(DdrVariant::None)), 10).unwrap();
        let bytes = net.to_bytes();
        let err = SdNetwork::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SdNetwork::<f32>::from_bytes(&bad).unwrap_err().to_string().contains("byte 0"));
    }
}
