//! Modality-specific affine heads and model serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::amd::DistillMode;
use crate::asi::{AsiForce, ReliabilityMode};
use crate::dataset::{to_json, Modality, FORMAT_VERSION};
use crate::error::{check_len, Error, Result};
use crate::metric::DistanceMode;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const DEFAULT_PROJ_DIM: usize = 64;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 1e-3;

/// Affine map `weight · x + bias` with `weight` stored row-major
/// (`d_proj × d_in`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    d_in: usize,
    d_proj: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn new(d_in: usize, d_proj: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if d_in == 0 || d_proj == 0 {
            return Err(Error::InvalidConfig("head dimensions must be >= 1".into()));
        }
        check_len("head weight", d_in * d_proj, weight.len())?;
        check_len("head bias", d_proj, bias.len())?;
        Ok(Self {
            d_in,
            d_proj,
            weight,
            bias,
        })
    }

    pub fn zeros(d_in: usize, d_proj: usize) -> Self {
        Self {
            d_in,
            d_proj,
            weight: vec![T::zero(); d_in * d_proj],
            bias: vec![T::zero(); d_proj],
        }
    }

    /// Square identity head scaled by `scale`.
    pub fn scaled_identity(dim: usize, scale: T) -> Self {
        let mut h = Self::zeros(dim, dim);
        for i in 0..dim {
            h.weight[i * dim + i] = scale;
        }
        h
    }

    /// Glorot-style Gaussian weights, zero bias.
    pub fn glorot(d_in: usize, d_proj: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (d_in + d_proj) as f64).sqrt();
        let weight = (0..d_in * d_proj)
            .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            d_in,
            d_proj,
            weight,
            bias: vec![T::zero(); d_proj],
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_proj(&self) -> usize {
        self.d_proj
    }

    pub fn weight_row(&self, i: usize) -> &[T] {
        &self.weight[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("embed input", self.d_in, x.len())?;
        Ok(self.embed_unchecked(x))
    }

    pub(crate) fn embed_unchecked(&self, x: &[T]) -> Vec<T> {
        (0..self.d_proj)
            .map(|i| {
                self.weight_row(i)
                    .iter()
                    .zip(x)
                    .fold(self.bias[i], |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub d_proj: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub reliability_mode: ReliabilityMode,
    pub distance_mode: DistanceMode,
    pub distill_mode: DistillMode,
    #[serde(default)]
    pub asi_force: AsiForce,
    /// Minimum |F_r - F_f| for a query to take part in distillation.
    #[serde(default)]
    pub asi_margin: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            d_proj: DEFAULT_PROJ_DIM,
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            reliability_mode: ReliabilityMode::default(),
            distance_mode: DistanceMode::default(),
            distill_mode: DistillMode::default(),
            asi_force: AsiForce::default(),
            asi_margin: 0.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.d_proj == 0 {
            return Err(Error::InvalidConfig("d_proj must be >= 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be finite and > 0".into()));
        }
        if !(self.asi_margin.is_finite() && self.asi_margin >= 0.0) {
            return Err(Error::InvalidConfig("asi margin must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub head_r: HeadParams<T>,
    pub head_f: HeadParams<T>,
    pub hyper: Hyper,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(head_r: HeadParams<T>, head_f: HeadParams<T>, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        check_len("rgb head d_proj", hyper.d_proj, head_r.d_proj())?;
        check_len("flow head d_proj", hyper.d_proj, head_f.d_proj())?;
        Ok(Self {
            head_r,
            head_f,
            hyper,
        })
    }

    pub fn head(&self, m: Modality) -> &HeadParams<T> {
        match m {
            Modality::Rgb => &self.head_r,
            Modality::Flow => &self.head_f,
        }
    }

    pub fn head_mut(&mut self, m: Modality) -> &mut HeadParams<T> {
        match m {
            Modality::Rgb => &mut self.head_r,
            Modality::Flow => &mut self.head_f,
        }
    }

    /// Errors unless the heads accept the given raw dimensions.
    pub fn check_dims(&self, dim_rgb: usize, dim_flow: usize) -> Result<()> {
        check_len("rgb head input dimension", self.head_r.d_in(), dim_rgb)?;
        check_len("flow head input dimension", self.head_f.d_in(), dim_flow)
    }
}

pub fn init_heads<T: Scalar>(
    dim_rgb: usize,
    dim_flow: usize,
    hyper: Hyper,
    rng: &mut Rng,
) -> Result<ModelBundle<T>> {
    hyper.validate()?;
    if dim_rgb == 0 || dim_flow == 0 {
        return Err(Error::InvalidConfig("input dimensions must be >= 1".into()));
    }
    let head_r = HeadParams::glorot(dim_rgb, hyper.d_proj, rng);
    let head_f = HeadParams::glorot(dim_flow, hyper.d_proj, rng);
    ModelBundle::new(head_r, head_f, hyper)
}

#[derive(Serialize, Deserialize)]
struct ModelMetaLine {
    kind: String,
    format_version: u32,
    hyper: Hyper,
}

#[derive(Serialize, Deserialize)]
struct HeadLine {
    head: Modality,
    d_in: usize,
    d_proj: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

pub fn save_model<T: Scalar>(model: &ModelBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_model<T: Scalar>(model: &ModelBundle<T>, mut w: impl Write) -> Result<()> {
    let meta = ModelMetaLine {
        kind: "model".into(),
        format_version: FORMAT_VERSION,
        hyper: model.hyper.clone(),
    };
    writeln!(w, "{}", to_json(&meta))?;
    for m in [Modality::Rgb, Modality::Flow] {
        let h = model.head(m);
        let line = HeadLine {
            head: m,
            d_in: h.d_in(),
            d_proj: h.d_proj(),
            weight: h.weight.iter().map(|v| v.as_f64()).collect(),
            bias: h.bias.iter().map(|v| v.as_f64()).collect(),
        };
        writeln!(w, "{}", to_json(&line))?;
    }
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelBundle<T>> {
    read_model(File::open(path)?)
}

pub fn read_model<T: Scalar>(reader: impl Read) -> Result<ModelBundle<T>> {
    let mut meta: Option<ModelMetaLine> = None;
    let mut head_r = None;
    let mut head_f = None;
    let mut last_line = 0;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            line: line_no,
            message,
        };
        if meta.is_none() {
            let m: ModelMetaLine =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if m.kind != "model" || m.format_version != FORMAT_VERSION {
                return Err(malformed(format!(
                    "expected model metadata (format_version {FORMAT_VERSION})"
                )));
            }
            meta = Some(m);
            continue;
        }
        let h: HeadLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let params = HeadParams::new(
            h.d_in,
            h.d_proj,
            h.weight.into_iter().map(T::lit).collect(),
            h.bias.into_iter().map(T::lit).collect(),
        )?;
        let slot = match h.head {
            Modality::Rgb => &mut head_r,
            Modality::Flow => &mut head_f,
        };
        if slot.replace(params).is_some() {
            return Err(malformed("duplicate head".into()));
        }
    }
    let missing = |what: &str| Error::Malformed {
        line: last_line.max(1),
        message: format!("missing {what}"),
    };
    let meta = meta.ok_or_else(|| missing("model metadata"))?;
    let head_r = head_r.ok_or_else(|| missing("rgb head"))?;
    let head_f = head_f.ok_or_else(|| missing("flow head"))?;
    if !(head_r.is_finite() && head_f.is_finite()) {
        return Err(missing("finite parameters"));
    }
    ModelBundle::new(head_r, head_f, meta.hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a: ModelBundle<f64> = init_heads(5, 3, Hyper::default(), &mut rng::seeded(11)).unwrap();
        let b: ModelBundle<f64> = init_heads(5, 3, Hyper::default(), &mut rng::seeded(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hyper.d_proj, 64);
        assert_eq!(a.head_r.d_proj(), 64);
        assert!(a.head_r.bias.iter().chain(&a.head_f.bias).all(|&b| b == 0.0));
    }

    #[test]
    fn glorot_scale_matches_contract() {
        let h: HeadParams<f64> = HeadParams::glorot(100, 60, &mut rng::seeded(2));
        let n = h.weight.len() as f64;
        let mean = h.weight.iter().sum::<f64>() / n;
        let var = h.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / 160.0;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn identity_and_bias_only_heads() {
        let id = HeadParams::<f64>::scaled_identity(3, 1.0);
        assert_eq!(id.embed(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let mut z = HeadParams::<f64>::zeros(4, 2);
        z.bias = vec![0.25, -3.0];
        assert_eq!(z.embed(&[9.0, 9.0, 9.0, 9.0]).unwrap(), vec![0.25, -3.0]);
        assert!(matches!(z.embed(&[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn doubling_input_adds_weight_times_x() {
        let mut h: HeadParams<f64> = HeadParams::glorot(6, 4, &mut rng::seeded(5));
        h.bias = vec![0.1, 0.2, -0.3, 0.4];
        let x = [0.5, -1.0, 2.0, 0.0, 1.5, -0.25];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y1 = h.embed(&x).unwrap();
        let y2 = h.embed(&x2).unwrap();
        for i in 0..4 {
            let wx: f64 = h.weight_row(i).iter().zip(&x).map(|(w, v)| w * v).sum();
            assert!((y2[i] - y1[i] - wx).abs() < 1e-12);
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut m: ModelBundle<f64> = init_heads(7, 5, Hyper { d_proj: 3, ..Hyper::default() }, &mut rng::seeded(9)).unwrap();
        m.head_f.bias = vec![1e-300, -0.1, std::f64::consts::PI];
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back: ModelBundle<f64> = read_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        for (a, b) in m.head_r.weight.iter().zip(&back.head_r.weight) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn model_missing_head_is_malformed() {
        let m: ModelBundle<f64> = init_heads(2, 2, Hyper { d_proj: 2, ..Hyper::default() }, &mut rng::seeded(0)).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(2).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            read_model::<f64>(truncated.as_bytes()),
            Err(Error::Malformed { .. })
        ));
    }
}
