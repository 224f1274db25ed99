//! Closed-form parameter and FLOPs accounting.
//!
//! Counts follow one multiply-accumulate = one FLOP. Bias and norm-gain terms
//! are kept in separate fields so the bias-free expressions can be compared
//! digit for digit. All ratios are exact rationals.

mod network;
mod report;

pub use network::{count_cnn, count_descriptor, count_transformer, TransformerFlops};
pub use report::{ComplexityReport, Totals, CSV_COLUMNS};

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ConvSpec;

/// How a multiply-accumulate is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlopConvention {
    /// One MAC = one FLOP.
    #[default]
    #[serde(rename = "mac=1")]
    Mac1,
    /// One MAC = two FLOPs.
    #[serde(rename = "mac=2")]
    Mac2,
}

impl FlopConvention {
    pub fn multiplier(self) -> u64 {
        match self {
            FlopConvention::Mac1 => 1,
            FlopConvention::Mac2 => 2,
        }
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopConvention::Mac1 => "mac=1",
            FlopConvention::Mac2 => "mac=2",
        })
    }
}

impl FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mac=1" | "1" => Ok(FlopConvention::Mac1),
            "mac=2" | "2" => Ok(FlopConvention::Mac2),
            other => Err(Error::InvalidArgument(format!(
                "unknown FLOP convention {other:?} (expected mac=1 or mac=2)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    GroupedConv,
    DynamicConv,
    Linear,
    Embedding,
    Norm,
    Attention,
    Ffn,
    MoeFfn,
    Router,
    LmHead,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string tag"))
    }
}

/// Shape summary of a convolution, kept for approximation checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

impl ConvShape {
    pub fn out_area(&self) -> u64 {
        (self.out_h * self.out_w) as u64
    }
}

/// Parameter and FLOPs counts of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    /// Weight elements (matrices, kernels, embeddings).
    pub params_weights: u64,
    /// Bias and normalisation-gain elements.
    pub params_biases: u64,
    /// Bias-free FLOPs.
    pub flops: u64,
    /// FLOPs of bias additions.
    pub flops_biases: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvShape>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

impl LayerCost {
    pub fn params(&self) -> u64 {
        self.params_weights + self.params_biases
    }

    pub fn total_flops(&self) -> u64 {
        self.flops + self.flops_biases
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn scaled(mut self, convention: FlopConvention) -> Self {
        let k = convention.multiplier();
        self.flops *= k;
        self.flops_biases *= k;
        self
    }
}

fn conv_kind(spec: &ConvSpec) -> LayerKind {
    if spec.groups == 1 {
        LayerKind::Conv
    } else if spec.groups == spec.c_in && spec.groups == spec.c_out {
        LayerKind::DepthwiseConv
    } else {
        LayerKind::GroupedConv
    }
}

fn conv_shape(spec: &ConvSpec, out_h: usize, out_w: usize, m: Option<usize>) -> ConvShape {
    ConvShape {
        c_in: spec.c_in,
        c_out: spec.c_out,
        k: spec.k,
        groups: spec.groups,
        out_h,
        out_w,
        m,
    }
}

/// Standard convolution: `C_out·(C_in/g)·K²` weights and
/// `H'·W'·C_out·(C_in/g)·K²` FLOPs; a bias adds `C_out` parameters and
/// `H'·W'·C_out` FLOPs.
pub fn count_conv(spec: &ConvSpec, out_h: usize, out_w: usize) -> LayerCost {
    let weights = spec.weight_numel() as u64;
    let area = (out_h * out_w) as u64;
    let c_out = spec.c_out as u64;
    LayerCost {
        name: String::new(),
        kind: conv_kind(spec),
        params_weights: weights,
        params_biases: spec.bias_numel() as u64,
        flops: area * weights,
        flops_biases: if spec.has_bias { area * c_out } else { 0 },
        conv: Some(conv_shape(spec, out_h, out_w, None)),
        notes: String::new(),
    }
}

/// Dynamic convolution with `m` experts and a `C_in -> C_in -> m` router.
///
/// Bias-free: params `C_in² + C_in·m + m·C_out·(C_in/g)·K²`, FLOPs the same
/// plus `H'·W'·C_out·(C_in/g)·K²` (coefficient generation, weight fusion,
/// convolution). Router biases (`C_in + m`) and expert biases (`m·C_out`)
/// are reported in the bias fields; global pooling is not counted.
pub fn count_dynamic_conv(spec: &ConvSpec, m: usize, out_h: usize, out_w: usize) -> Result<LayerCost> {
    if m == 0 {
        return Err(Error::InvalidArgument("dynamic convolution needs m >= 1".into()));
    }
    let (c_in, c_out, mm) = (spec.c_in as u64, spec.c_out as u64, m as u64);
    let kernel = spec.weight_numel() as u64;
    let area = (out_h * out_w) as u64;
    let router_w = c_in * c_in + c_in * mm;
    let params_weights = router_w + mm * kernel;
    let router_b = c_in + mm;
    let expert_b = if spec.has_bias { mm * c_out } else { 0 };
    let flops_biases = router_b + expert_b + if spec.has_bias { area * c_out } else { 0 };
    Ok(LayerCost {
        name: String::new(),
        kind: LayerKind::DynamicConv,
        params_weights,
        params_biases: router_b + expert_b,
        flops: params_weights + area * kernel,
        flops_biases,
        conv: Some(conv_shape(spec, out_h, out_w, Some(m))),
        notes: format!("m={m}; router biases {router_b}; expert biases {expert_b}"),
    })
}

/// Exact non-negative rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExactRatio(pub Ratio<u128>);

impl ExactRatio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::InvalidArgument("ratio with zero denominator".into()));
        }
        Ok(Self(Ratio::new(num as u128, den as u128)))
    }

    pub fn numer(&self) -> u128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u128 {
        *self.0.denom()
    }

    pub fn to_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl fmt::Display for ExactRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} (≈{:.6})", self.numer(), self.denom(), self.to_f64())
    }
}

#[derive(Serialize, Deserialize)]
struct RatioRepr {
    num: String,
    den: String,
    value: f64,
}

impl Serialize for ExactRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RatioRepr {
            num: self.numer().to_string(),
            den: self.denom().to_string(),
            value: self.to_f64(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExactRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = RatioRepr::deserialize(d)?;
        let num: u128 = r.num.parse().map_err(D::Error::custom)?;
        let den: u128 = r.den.parse().map_err(D::Error::custom)?;
        if den == 0 {
            return Err(D::Error::custom("zero denominator"));
        }
        Ok(Self(Ratio::new(num, den)))
    }
}

/// `M ≪ C_out·K²` is taken to hold when `PARAM_REGIME_FACTOR·M ≤ C_out·K²`.
/// The dropped term of the parameter approximation is `M/(C_out·K²)`, so
/// this keeps its relative weight below 2%.
pub const PARAM_REGIME_FACTOR: u64 = 50;

/// `M ≪ H'·W'` is taken to hold when `FLOPS_REGIME_FACTOR·M ≤ H'·W'`.
pub const FLOPS_REGIME_FACTOR: u64 = 20;

/// `C_in ≈ C_out` is taken to hold when the ratio lies in this closed range.
pub const CHANNEL_RATIO_RANGE: (f64, f64) = (0.5, 2.0);

/// Exact dynamic-over-standard ratios with the closed-form approximations
/// and their validity conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    /// Bias-free parameter ratio.
    pub r_param: ExactRatio,
    /// Bias-free FLOPs ratio.
    pub r_flops: ExactRatio,
    /// `1/K² + M`, when both sides are convolutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_param_approx: Option<f64>,
    /// Always 1 when both sides are convolutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_flops_approx: Option<f64>,
    /// Whether `M ≪ C_out·K²` and `C_in = C_out` hold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_regime: Option<bool>,
    /// Whether `M ≪ H'·W'` and `C_in ≈ C_out` hold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_regime: Option<bool>,
    /// Human-readable reasons for every failed condition.
    pub flags: Vec<String>,
}

impl RatioReport {
    pub fn r_param_rel_error(&self) -> Option<f64> {
        let exact = self.r_param.to_f64();
        self.r_param_approx.map(|a| (exact - a).abs() / exact)
    }

    pub fn r_flops_abs_error(&self) -> Option<f64> {
        self.r_flops_approx.map(|a| (self.r_flops.to_f64() - a).abs())
    }
}

/// Exact bias-free ratios `dynamic / standard`; when both costs carry
/// convolution shapes, also evaluates `R_param ≈ 1/K² + M` and
/// `R_flops ≈ 1` and flags the conditions those approximations need.
pub fn ratios(standard: &LayerCost, dynamic: &LayerCost) -> Result<RatioReport> {
    if standard.params_weights == 0 || standard.flops == 0 {
        return Err(Error::InvalidArgument(format!(
            "standard layer {:?} has zero parameters or FLOPs",
            standard.name
        )));
    }
    let r_param = ExactRatio::new(dynamic.params_weights, standard.params_weights)?;
    let r_flops = ExactRatio::new(dynamic.flops, standard.flops)?;
    let mut out = RatioReport {
        r_param,
        r_flops,
        r_param_approx: None,
        r_flops_approx: None,
        param_regime: None,
        flops_regime: None,
        flags: Vec::new(),
    };
    let (Some(std_shape), Some(dyn_shape)) = (standard.conv, dynamic.conv) else {
        return Ok(out);
    };
    let m = dyn_shape.m.unwrap_or(1) as u64;
    let k2 = (std_shape.k * std_shape.k) as u64;
    let c_out = std_shape.c_out as u64;
    let area = std_shape.out_area();
    out.r_param_approx = Some(1.0 / k2 as f64 + m as f64);
    out.r_flops_approx = Some(1.0);

    let mut param_ok = true;
    if PARAM_REGIME_FACTOR * m > c_out * k2 {
        param_ok = false;
        out.flags.push(format!(
            "param approximation: M={m} is not << C_out*K^2={} (need {PARAM_REGIME_FACTOR}*M <= C_out*K^2)",
            c_out * k2
        ));
    }
    if std_shape.c_in != std_shape.c_out {
        param_ok = false;
        out.flags.push(format!(
            "param approximation: C_in={} differs from C_out={}",
            std_shape.c_in, std_shape.c_out
        ));
    }
    let mut flops_ok = true;
    if FLOPS_REGIME_FACTOR * m > area {
        flops_ok = false;
        out.flags.push(format!(
            "flops approximation: M={m} is not << H'W'={area} (need {FLOPS_REGIME_FACTOR}*M <= H'W')"
        ));
    }
    let channel_ratio = std_shape.c_in as f64 / std_shape.c_out as f64;
    if !(CHANNEL_RATIO_RANGE.0..=CHANNEL_RATIO_RANGE.1).contains(&channel_ratio) {
        flops_ok = false;
        out.flags.push(format!(
            "flops approximation: C_in/C_out={channel_ratio:.3} is not ≈ 1"
        ));
    }
    out.param_regime = Some(param_ok);
    out.flops_regime = Some(flops_ok);
    Ok(out)
}

/// Fits `y = a + b·x` through integer points and returns `(a, b)` only if
/// every point lies exactly on the line.
pub fn fit_affine_exact(points: &[(u64, u64)]) -> Option<(Ratio<i128>, Ratio<i128>)> {
    let (&(x0, y0), rest) = points.split_first()?;
    let (x1, y1) = *rest.iter().find(|(x, _)| *x != x0)?;
    let slope = Ratio::new(y1 as i128 - y0 as i128, x1 as i128 - x0 as i128);
    let intercept = Ratio::from_integer(y0 as i128) - slope * Ratio::from_integer(x0 as i128);
    let exact = points
        .iter()
        .all(|&(x, y)| intercept + slope * Ratio::from_integer(x as i128) == Ratio::from_integer(y as i128));
    exact.then_some((intercept, slope))
}
