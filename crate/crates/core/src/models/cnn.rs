//! GhostNet-style CNN with optional dynamic-convolution replacement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, Conv2d, ConvSpec, ConvUnit, GhostModule, ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub c_out: usize,
    #[serde(default = "three")]
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostBlockSpec {
    /// Expanded width is `c_in · expansion`, rounded up to an even count.
    pub expansion: f64,
    pub c_out: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Kernel of the strided depthwise convolution (used when `stride > 1`).
    #[serde(default = "three")]
    pub k: usize,
    /// Optional declared input width, checked against the previous block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_in: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Width of the 1x1 convolution before pooling.
    pub channels: usize,
}

/// Which convolutions become dynamic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceSet {
    /// Primary pointwise convolution of every block's expansion Ghost module.
    #[default]
    Expansion,
    /// Every pointwise convolution: both Ghost primaries, projection
    /// shortcuts, and the head convolution.
    AllPointwise,
    /// Expansion primaries of the listed blocks (global block index).
    Blocks(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicSpec {
    pub m: usize,
    #[serde(default)]
    pub replace_set: ReplaceSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnDescriptor {
    pub name: String,
    pub in_channels: usize,
    /// `[H, W]` of the input images.
    pub input_size: [usize; 2],
    pub stem: StemSpec,
    pub stages: Vec<Vec<GhostBlockSpec>>,
    pub head: HeadSpec,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic: Option<DynamicSpec>,
    /// Give every convolution a bias.
    #[serde(default = "yes")]
    pub bias: bool,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

/// Role of a convolution inside the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    Stem,
    ExpansionPrimary,
    ExpansionCheap,
    Downsample,
    ProjectionPrimary,
    ProjectionCheap,
    Shortcut,
    Head,
}

/// One convolution of the resolved network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvSite {
    pub name: String,
    pub role: SiteRole,
    pub block: Option<usize>,
    pub spec: ConvSpec,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub dynamic: Option<usize>,
}

/// Topology of a descriptor: every convolution with its geometry, in
/// execution order, plus the classifier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CnnPlan {
    pub sites: Vec<ConvSite>,
    pub classifier_in: usize,
    pub num_classes: usize,
}

impl CnnDescriptor {
    /// Tiny three-stage network (16/32/64 channels) for 32x32 inputs.
    pub fn toy(num_classes: usize) -> Self {
        let block = |expansion, c_out, stride| GhostBlockSpec {
            expansion,
            c_out,
            stride,
            k: 3,
            c_in: None,
        };
        Self {
            name: "toy-ghostnet".into(),
            in_channels: 3,
            input_size: [32, 32],
            stem: StemSpec {
                c_out: 16,
                k: 3,
                stride: 2,
            },
            stages: vec![
                vec![block(2.0, 16, 1)],
                vec![block(2.0, 32, 2)],
                vec![block(2.0, 64, 2)],
            ],
            head: HeadSpec { channels: 64 },
            num_classes,
            dynamic: None,
            bias: true,
        }
    }

    /// One-block network (8 channels, 16-wide head) for small inputs.
    pub fn tiny(in_channels: usize, input_size: [usize; 2], num_classes: usize) -> Self {
        Self {
            name: "tiny-ghostnet".into(),
            in_channels,
            input_size,
            stem: StemSpec {
                c_out: 8,
                k: 3,
                stride: 1,
            },
            stages: vec![vec![GhostBlockSpec {
                expansion: 2.0,
                c_out: 8,
                stride: 2,
                k: 3,
                c_in: None,
            }]],
            head: HeadSpec { channels: 16 },
            num_classes,
            dynamic: None,
            bias: true,
        }
    }

    pub fn with_dynamic(mut self, m: usize, replace_set: ReplaceSet) -> Self {
        self.dynamic = Some(DynamicSpec { m, replace_set });
        self
    }

    pub fn without_dynamic(mut self) -> Self {
        self.dynamic = None;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    fn dynamic_for(&self, role: SiteRole, block: Option<usize>) -> Option<usize> {
        let d = self.dynamic.as_ref()?;
        let selected = match (&d.replace_set, role) {
            (ReplaceSet::Expansion, SiteRole::ExpansionPrimary) => true,
            (
                ReplaceSet::AllPointwise,
                SiteRole::ExpansionPrimary
                | SiteRole::ProjectionPrimary
                | SiteRole::Shortcut
                | SiteRole::Head,
            ) => true,
            (ReplaceSet::Blocks(ids), SiteRole::ExpansionPrimary) => {
                block.is_some_and(|b| ids.contains(&b))
            }
            _ => false,
        };
        selected.then_some(d.m)
    }

    /// Validates the descriptor and resolves every convolution.
    pub fn plan(&self) -> Result<CnnPlan> {
        let fail = |location: String, message: String| Error::Validation { location, message };
        if self.in_channels == 0 || self.num_classes == 0 || self.head.channels == 0 {
            return Err(fail(
                "descriptor".into(),
                "in_channels, num_classes and head.channels must be positive".into(),
            ));
        }
        if let Some(d) = &self.dynamic {
            if d.m == 0 {
                return Err(fail("dynamic".into(), "m must be at least 1".into()));
            }
            if let ReplaceSet::Blocks(ids) = &d.replace_set {
                if let Some(bad) = ids.iter().find(|&&b| b >= self.num_blocks()) {
                    return Err(fail(
                        "dynamic.replace_set".into(),
                        format!("block {bad} does not exist ({} blocks)", self.num_blocks()),
                    ));
                }
            }
        }
        let mut sites = Vec::new();
        let mut hw = (self.input_size[0], self.input_size[1]);
        let bias = self.bias;
        let push = |sites: &mut Vec<ConvSite>,
                        name: String,
                        role: SiteRole,
                        block: Option<usize>,
                        spec: ConvSpec,
                        hw: &mut (usize, usize)|
         -> Result<()> {
            spec.validate().map_err(|e| fail(name.clone(), e.to_string()))?;
            let out = spec.output_size(hw.0, hw.1).filter(|&(h, w)| h >= 1 && w >= 1).ok_or_else(|| {
                fail(
                    name.clone(),
                    format!("input {}x{} leaves no output for {spec:?}", hw.0, hw.1),
                )
            })?;
            sites.push(ConvSite {
                dynamic: self.dynamic_for(role, block),
                name,
                role,
                block,
                spec,
                in_hw: *hw,
                out_hw: out,
            });
            *hw = out;
            Ok(())
        };

        let stem = ConvSpec::new(self.in_channels, self.stem.c_out, self.stem.k)
            .with_stride(self.stem.stride)
            .with_bias(bias);
        push(&mut sites, "stem".into(), SiteRole::Stem, None, stem, &mut hw)?;

        let mut c = self.stem.c_out;
        let mut index = 0;
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                let prefix = format!("stages.{s}.blocks.{b}");
                if let Some(declared) = blk.c_in {
                    if declared != c {
                        return Err(fail(
                            format!("block {index} ({prefix})"),
                            format!("declared c_in {declared} but previous layer produces {c}"),
                        ));
                    }
                }
                if !(blk.expansion > 0.0) || blk.stride == 0 || blk.k == 0 {
                    return Err(fail(
                        format!("block {index} ({prefix})"),
                        "expansion, stride and k must be positive".into(),
                    ));
                }
                if blk.c_out == 0 || blk.c_out % 2 != 0 {
                    return Err(fail(
                        format!("block {index} ({prefix})"),
                        format!("c_out {} must be even and positive", blk.c_out),
                    ));
                }
                let mid = expanded_width(c, blk.expansion);
                let in_hw = hw;
                let mut h = hw;
                push(
                    &mut sites,
                    format!("{prefix}.ghost1.primary"),
                    SiteRole::ExpansionPrimary,
                    Some(index),
                    GhostModule::primary_spec(c, mid, bias),
                    &mut h,
                )?;
                push(
                    &mut sites,
                    format!("{prefix}.ghost1.cheap"),
                    SiteRole::ExpansionCheap,
                    Some(index),
                    GhostModule::cheap_spec(mid, bias),
                    &mut h,
                )?;
                if blk.stride > 1 {
                    let dw = ConvSpec::depthwise(mid, blk.k)
                        .with_stride(blk.stride)
                        .with_bias(bias);
                    push(&mut sites, format!("{prefix}.dw"), SiteRole::Downsample, Some(index), dw, &mut h)?;
                }
                push(
                    &mut sites,
                    format!("{prefix}.ghost2.primary"),
                    SiteRole::ProjectionPrimary,
                    Some(index),
                    GhostModule::primary_spec(mid, blk.c_out, bias),
                    &mut h,
                )?;
                push(
                    &mut sites,
                    format!("{prefix}.ghost2.cheap"),
                    SiteRole::ProjectionCheap,
                    Some(index),
                    GhostModule::cheap_spec(blk.c_out, bias),
                    &mut h,
                )?;
                if blk.stride > 1 || c != blk.c_out {
                    let mut sh = in_hw;
                    let sc = ConvSpec::new(c, blk.c_out, 1)
                        .with_stride(blk.stride)
                        .with_bias(bias);
                    push(&mut sites, format!("{prefix}.shortcut"), SiteRole::Shortcut, Some(index), sc, &mut sh)?;
                    debug_assert_eq!(sh, h);
                }
                hw = h;
                c = blk.c_out;
                index += 1;
            }
        }
        let head = ConvSpec::new(c, self.head.channels, 1).with_bias(bias);
        push(&mut sites, "head.conv".into(), SiteRole::Head, None, head, &mut hw)?;
        Ok(CnnPlan {
            sites,
            classifier_in: self.head.channels,
            num_classes: self.num_classes,
        })
    }
}

/// `c · expansion` rounded up to the next even integer.
pub fn expanded_width(c: usize, expansion: f64) -> usize {
    let raw = (c as f64 * expansion).ceil() as usize;
    (raw + raw % 2).max(2)
}

#[derive(Clone, Debug)]
struct GhostBlock {
    ghost1: GhostModule,
    dw: Option<Conv2d>,
    ghost2: GhostModule,
    shortcut: Option<ConvUnit>,
}

/// Runnable CNN built from a [`CnnDescriptor`].
#[derive(Clone, Debug)]
pub struct CnnModel {
    pub descriptor: CnnDescriptor,
    pub plan: CnnPlan,
    pub params: ParamStore,
    stem: ConvUnit,
    blocks: Vec<GhostBlock>,
    head: ConvUnit,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

/// Forward result with the coefficients of every dynamic convolution.
pub struct CnnOutput<'t> {
    pub logits: Var<'t>,
    pub coefficients: Vec<Var<'t>>,
}

impl CnnModel {
    pub fn build(desc: &CnnDescriptor, rng: &Prng) -> Result<Self> {
        let plan = desc.plan()?;
        let mut params = ParamStore::new();
        let mut rng = rng.split("cnn");
        let site = |name: &str| plan.sites.iter().find(|s| s.name == name).expect("planned site");
        let bias = desc.bias;

        let s = site("stem");
        let stem = ConvUnit::new(&mut params, "stem", s.spec, s.dynamic, &mut rng)?;
        let mut blocks = Vec::new();
        let mut c = desc.stem.c_out;
        for (si, stage) in desc.stages.iter().enumerate() {
            for (bi, blk) in stage.iter().enumerate() {
                let prefix = format!("stages.{si}.blocks.{bi}");
                let mid = expanded_width(c, blk.expansion);
                let g1 = site(&format!("{prefix}.ghost1.primary"));
                let ghost1 = GhostModule::new(
                    &mut params,
                    &format!("{prefix}.ghost1"),
                    c,
                    mid,
                    true,
                    bias,
                    g1.dynamic,
                    &mut rng,
                )?;
                let dw = if blk.stride > 1 {
                    Some(Conv2d::new(
                        &mut params,
                        &format!("{prefix}.dw"),
                        site(&format!("{prefix}.dw")).spec,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                let g2 = site(&format!("{prefix}.ghost2.primary"));
                let ghost2 = GhostModule::new(
                    &mut params,
                    &format!("{prefix}.ghost2"),
                    mid,
                    blk.c_out,
                    false,
                    bias,
                    g2.dynamic,
                    &mut rng,
                )?;
                let shortcut = if blk.stride > 1 || c != blk.c_out {
                    let sc = site(&format!("{prefix}.shortcut"));
                    Some(ConvUnit::new(
                        &mut params,
                        &format!("{prefix}.shortcut"),
                        sc.spec,
                        sc.dynamic,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                blocks.push(GhostBlock {
                    ghost1,
                    dw,
                    ghost2,
                    shortcut,
                });
                c = blk.c_out;
            }
        }
        let h = site("head.conv");
        let head = ConvUnit::new(&mut params, "head.conv", h.spec, h.dynamic, &mut rng)?;
        let mut crng = rng.split("classifier");
        let bound = 1.0 / (plan.classifier_in as f64).sqrt();
        let classifier_w = params.add(
            "classifier.weight",
            crng.uniform_tensor([plan.classifier_in, desc.num_classes], -bound, bound),
        );
        let classifier_b = params.add("classifier.bias", Tensor::zeros([desc.num_classes]));
        Ok(Self {
            descriptor: desc.clone(),
            plan,
            params,
            stem,
            blocks,
            head,
            classifier_w,
            classifier_b,
        })
    }

    /// Logits `[B, num_classes]` for images `[B, C, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<CnnOutput<'t>> {
        let mut trace = Vec::new();
        let mut h = self.stem.forward_traced(p, x, &mut trace)?.relu();
        for blk in &self.blocks {
            let mut y = blk.ghost1.forward_traced(p, h, &mut trace)?;
            if let Some(dw) = &blk.dw {
                y = dw.forward(p, y)?;
            }
            y = blk.ghost2.forward_traced(p, y, &mut trace)?;
            let skip = match &blk.shortcut {
                Some(sc) => sc.forward_traced(p, h, &mut trace)?,
                None => h,
            };
            h = y.add(skip)?;
        }
        let h = self.head.forward_traced(p, h, &mut trace)?.relu();
        let logits = h
            .global_avg_pool()?
            .matmul(p.get(self.classifier_w))?
            .add_bias(p.get(self.classifier_b))?;
        Ok(CnnOutput {
            logits,
            coefficients: trace,
        })
    }

    /// Runs the single convolution at plan site `name`, without the
    /// activation that may follow it in the network.
    pub fn site_forward<'t>(&self, name: &str, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let site = self
            .plan
            .sites
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no convolution site `{name}`")))?;
        let mut trace = Vec::new();
        let block = match site.block {
            None if name == "stem" => return self.stem.forward_traced(p, x, &mut trace),
            None => return self.head.forward_traced(p, x, &mut trace),
            Some(b) => &self.blocks[b],
        };
        match name.rsplit_once(".blocks.").and_then(|(_, rest)| rest.split_once('.')).map(|(_, leaf)| leaf) {
            Some("ghost1.primary") => block.ghost1.primary.forward_traced(p, x, &mut trace),
            Some("ghost1.cheap") => block.ghost1.cheap.forward(p, x),
            Some("ghost2.primary") => block.ghost2.primary.forward_traced(p, x, &mut trace),
            Some("ghost2.cheap") => block.ghost2.cheap.forward(p, x),
            Some("dw") => block.dw.as_ref().expect("planned").forward(p, x),
            Some("shortcut") => block.shortcut.as_ref().expect("planned").forward_traced(p, x, &mut trace),
            _ => Err(Error::InvalidArgument(format!("no convolution site `{name}`"))),
        }
    }

    /// The classifier alone: `x · W + b` for pooled features `[B, classifier_in]`.
    pub fn classifier_forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.classifier_w))?.add_bias(p.get(self.classifier_b))
    }

    /// Logits for a batch without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = crate::tensor::Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(x.clone()))?;
        let logits = out.logits.value();
        Ok((*logits).clone())
    }
}
