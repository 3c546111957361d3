//! Closed-form weights for detecting solid colored squares on a gray
//! background.
//!
//! Level `l` with stride `s` responds to squares of side `2s`:
//!
//! * `color` turns each pixel into per-class color excess (1 inside a square
//!   of that class, 0 on gray).
//! * `pool{l}` averages each `s×s` cell into mass plus x/y first moments.
//! * `neck{l}` sums mass and moments over a 5×5 cell window. A square of side
//!   `2s` has mass 4 (in cell units), so the first moment divided by 4 is the
//!   offset of its center from the cell center. The remaining channels are
//!   ReLU penalties for the center lying outside the cell, for too much mass,
//!   and for any mass in the outer ring of the window. A square centered in
//!   the middle cell never reaches the ring, so ring mass means pieces of
//!   other objects.
//! * Evidence `E = 3·M0 − 10·(center penalties) − 10·(oversize) − 100·(ring)`
//!   is 12 at the cell holding the square's center and strongly negative
//!   around it.
//! * `cls{l}` holds K scaled copies of `relu(E − ½M0)` (evidence channels)
//!   and `relu(M0)` (mass channels); `cls_pred{l}` recombines them into
//!   `relu(E − ½M0) + ½M0 − ¼·(other classes) − 6`, less small offsets that
//!   keep empty-background ReLUs off their kink.
//!
//! Class-head weights are sized so the mean gradient of each channel sits in
//! `[0.45, 0.65]`, which keeps the Gaussian spread a cell or two wide.

use crate::detector::{
    cls_layer, cls_pred_layer, obj_pred_layer, reg_pred_layer, Branch, ConvLayer, Detector,
    DetectorConfig, DetectorWeights, IMAGE_INPUT,
};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tensor};

/// Distinct square colors the construction can separate, one per class.
pub const CLASS_COLORS: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

const WINDOW: usize = 5;
const MASS_GAIN: f32 = 3.0;
const CENTER_PENALTY: f32 = 10.0;
const OVERSIZE_PENALTY: f32 = 10.0;
/// `|first moment|` allowed before the center leaves the cell: mass 4 × half a cell.
const CENTER_TOLERANCE: f32 = 2.0;
const OVERSIZE_MASS: f32 = 4.5;
const RING_PENALTY: f32 = 100.0;
/// Small negative offsets that keep ReLUs strictly off their kink on empty
/// background, where the pre-activation would otherwise be exactly zero.
const SLACK: f32 = 0.01;
/// Same for class-branch evidence channels, in evidence units. Penalties
/// enter with weight up to 100, so this needs more room than [`SLACK`].
const EVIDENCE_SLACK: f32 = 1.0;
const MOMENT_OFFSET: f32 = 16.0;
const LOGIT_BIAS: f32 = 6.0;
const MASS_SHARE: f32 = 0.5;
const CROSS_CLASS: f32 = 0.25;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

// neck channel offsets within one class group
const N_MASS: usize = 0;
const N_XPOS: usize = 1;
const N_YPOS: usize = 2;
const N_XHI: usize = 3;
const N_XLO: usize = 4;
const N_YHI: usize = 5;
const N_YLO: usize = 6;
const N_BIG: usize = 7;
const N_RING: usize = 8;
const NECK_PER_CLASS: usize = 9;

/// Builds the deterministic blob detector for `config`.
pub fn build_blob_detector(config: &DetectorConfig) -> Result<Detector> {
    config.validate()?;
    let c = config.num_classes;
    if c > CLASS_COLORS.len() {
        return Err(Error::UnsupportedConfig(format!(
            "at most {} classes are supported, got {c}",
            CLASS_COLORS.len()
        )));
    }
    for (l, level) in config.levels.iter().enumerate() {
        if level.channels < c {
            return Err(Error::UnsupportedConfig(format!(
                "level {l}: needs at least one channel per class ({} < {c})",
                level.channels
            )));
        }
    }

    let mut layers = vec![color_layer(c)];
    for (l, level) in config.levels.iter().enumerate() {
        let (h, w) = config.grid(l);
        layers.push(pool_layer(l, level.stride, c));
        layers.push(neck_layer(l, c));
        let (cls, cls_pred) = class_branch(l, c, level.channels, h * w);
        layers.push(cls);
        layers.push(cls_pred);
        layers.extend(regression_branch(l, c));
    }
    Detector::from_parts(config.clone(), DetectorWeights { layers })
}

fn conv(
    id: String,
    input: &str,
    weight: Tensor,
    bias: Vec<f32>,
    stride: usize,
    padding: usize,
    activation: Option<Activation>,
    branch: Branch,
) -> ConvLayer {
    let n = bias.len();
    ConvLayer {
        id,
        input: input.to_string(),
        weight,
        bias: Tensor::new(vec![n], bias).expect("bias is rank 1"),
        stride,
        padding,
        activation,
        branch,
    }
}

/// Index helper for `[cout, cin, kh, kw]` weights.
struct Kernel {
    t: Tensor,
    cin: usize,
    kh: usize,
    kw: usize,
}

impl Kernel {
    fn new(cout: usize, cin: usize, kh: usize, kw: usize) -> Self {
        Self {
            t: Tensor::zeros(vec![cout, cin, kh, kw]),
            cin,
            kh,
            kw,
        }
    }

    fn set(&mut self, co: usize, ci: usize, y: usize, x: usize, v: f32) {
        let idx = ((co * self.cin + ci) * self.kh + y) * self.kw + x;
        self.t.data_mut()[idx] = v;
    }

    fn add(&mut self, co: usize, ci: usize, y: usize, x: usize, v: f32) {
        let idx = ((co * self.cin + ci) * self.kh + y) * self.kw + x;
        self.t.data_mut()[idx] += v;
    }
}

fn color_layer(c: usize) -> ConvLayer {
    let mut k = Kernel::new(c, 3, 1, 1);
    for class in 0..c {
        for ch in 0..3 {
            k.set(class, ch, 0, 0, if ch == class { 1.0 } else { -0.5 });
        }
    }
    conv(
        "color".into(),
        IMAGE_INPUT,
        k.t,
        vec![0.0; c],
        1,
        0,
        Some(Activation::Relu),
        Branch::Backbone,
    )
}

fn pool_layer(level: usize, s: usize, c: usize) -> ConvLayer {
    let mut k = Kernel::new(3 * c, c, s, s);
    let sf = s as f32;
    let area = 1.0 / (sf * sf);
    for class in 0..c {
        for u in 0..s {
            for v in 0..s {
                let dx = (v as f32 + 0.5) / sf - 0.5;
                let dy = (u as f32 + 0.5) / sf - 0.5;
                k.set(3 * class, class, u, v, area);
                k.set(3 * class + 1, class, u, v, area * dx);
                k.set(3 * class + 2, class, u, v, area * dy);
            }
        }
    }
    conv(
        format!("pool{level}"),
        "color",
        k.t,
        vec![0.0; 3 * c],
        s,
        0,
        None,
        Branch::Backbone,
    )
}

fn neck_layer(level: usize, c: usize) -> ConvLayer {
    let mut k = Kernel::new(NECK_PER_CLASS * c, 3 * c, WINDOW, WINDOW);
    let mut bias = vec![0.0; NECK_PER_CLASS * c];
    let r = (WINDOW / 2) as isize;
    for class in 0..c {
        let o = NECK_PER_CLASS * class;
        let (m, mx, my) = (3 * class, 3 * class + 1, 3 * class + 2);
        for u in 0..WINDOW {
            for v in 0..WINDOW {
                let di = (u as isize - r) as f32;
                let dj = (v as isize - r) as f32;
                k.set(o + N_MASS, m, u, v, 1.0);
                k.set(o + N_BIG, m, u, v, 1.0);
                if di.abs() == r as f32 || dj.abs() == r as f32 {
                    k.set(o + N_RING, m, u, v, 1.0);
                }
                // X = Σ (mx + m·dj), Y = Σ (my + m·di)
                for (ch, sign) in [(N_XPOS, 1.0), (N_XHI, 1.0), (N_XLO, -1.0)] {
                    k.set(o + ch, mx, u, v, sign);
                    k.set(o + ch, m, u, v, sign * dj);
                }
                for (ch, sign) in [(N_YPOS, 1.0), (N_YHI, 1.0), (N_YLO, -1.0)] {
                    k.set(o + ch, my, u, v, sign);
                    k.set(o + ch, m, u, v, sign * di);
                }
            }
        }
        bias[o + N_XPOS] = MOMENT_OFFSET;
        bias[o + N_YPOS] = MOMENT_OFFSET;
        for ch in [N_XHI, N_XLO, N_YHI, N_YLO] {
            bias[o + ch] = -CENTER_TOLERANCE;
        }
        bias[o + N_BIG] = -OVERSIZE_MASS;
        bias[o + N_RING] = -SLACK;
        bias[o + N_MASS] = -SLACK;
    }
    conv(
        format!("neck{level}"),
        &format!("pool{level}"),
        k.t,
        bias,
        1,
        WINDOW / 2,
        Some(Activation::Relu),
        Branch::Backbone,
    )
}

/// Adds `scale · E_class` (optionally minus `shift · M0`) into row `row` of a 1×1 kernel.
fn add_evidence(k: &mut Kernel, row: usize, class: usize, scale: f32, mass_shift: f32) {
    let o = NECK_PER_CLASS * class;
    k.add(row, o + N_MASS, 0, 0, scale * (MASS_GAIN - mass_shift));
    for ch in [N_XHI, N_XLO, N_YHI, N_YLO] {
        k.add(row, o + ch, 0, 0, -scale * CENTER_PENALTY);
    }
    k.add(row, o + N_BIG, 0, 0, -scale * OVERSIZE_PENALTY);
    k.add(row, o + N_RING, 0, 0, -scale * RING_PENALTY);
}

fn class_branch(level: usize, c: usize, k_channels: usize, cells: usize) -> (ConvLayer, ConvLayer) {
    let neck_ch = NECK_PER_CLASS * c;
    let mut cls = Kernel::new(k_channels, neck_ch, 1, 1);
    let mut pred = Kernel::new(c, k_channels, 1, 1);
    let mut bias = vec![0.0; k_channels];

    for class in 0..c {
        let members: Vec<usize> = (class..k_channels).step_by(c).collect();
        let is_mass = |m: usize| members.len() >= 4 && m % 4 == 3;
        let n_mass = (0..members.len()).filter(|&m| is_mass(m)).count();
        let n_evidence = members.len() - n_mass;
        let shift = if n_mass > 0 { MASS_SHARE } else { 0.0 };

        for (m, &k) in members.iter().enumerate() {
            let frac = ((k + 1) as f64 * GOLDEN).fract() as f32;
            let head_w = cells as f32 * (0.45 + 0.2 * frac);
            if is_mass(m) {
                let scale = MASS_SHARE / (n_mass as f32 * head_w);
                cls.set(k, NECK_PER_CLASS * class + N_MASS, 0, 0, scale);
                bias[k] = -scale * SLACK;
            } else {
                let scale = 1.0 / (n_evidence as f32 * head_w);
                add_evidence(&mut cls, k, class, scale, shift);
                bias[k] = -scale * EVIDENCE_SLACK;
            }
            for other in 0..c {
                let v = if other == class {
                    head_w
                } else {
                    -CROSS_CLASS * head_w
                };
                pred.set(other, k, 0, 0, v);
            }
        }
    }

    let neck = format!("neck{level}");
    let cls_id = cls_layer(level);
    (
        conv(
            cls_id.clone(),
            &neck,
            cls.t,
            bias,
            1,
            0,
            Some(Activation::Relu),
            Branch::Classification,
        ),
        conv(
            cls_pred_layer(level),
            &cls_id,
            pred.t,
            vec![-LOGIT_BIAS; c],
            1,
            0,
            None,
            Branch::Classification,
        ),
    )
}

fn regression_branch(level: usize, c: usize) -> [ConvLayer; 3] {
    let neck_ch = NECK_PER_CLASS * c;
    let mut reg = Kernel::new(3 * c, neck_ch, 1, 1);
    for class in 0..c {
        add_evidence(&mut reg, 3 * class, class, 1.0, 0.0);
        reg.set(3 * class + 1, NECK_PER_CLASS * class + N_XPOS, 0, 0, 1.0);
        reg.set(3 * class + 2, NECK_PER_CLASS * class + N_YPOS, 0, 0, 1.0);
    }

    let mut obj = Kernel::new(1, 3 * c, 1, 1);
    let mut box_k = Kernel::new(4, 3 * c, 1, 1);
    // center offset = first moment / mass, and a calibrated square has mass 4
    let moment_scale = 0.25;
    for class in 0..c {
        obj.set(0, 3 * class, 0, 0, 1.0);
        box_k.set(0, 3 * class + 1, 0, 0, moment_scale);
        box_k.set(1, 3 * class + 2, 0, 0, moment_scale);
    }
    let offset_bias = 0.5 - moment_scale * MOMENT_OFFSET * c as f32;
    let size = 2f32.ln();

    let reg_id = format!("reg{level}");
    [
        conv(
            reg_id.clone(),
            &format!("neck{level}"),
            reg.t,
            vec![0.0; 3 * c],
            1,
            0,
            Some(Activation::Relu),
            Branch::Regression,
        ),
        conv(
            obj_pred_layer(level),
            &reg_id,
            obj.t,
            vec![-LOGIT_BIAS],
            1,
            0,
            None,
            Branch::Regression,
        ),
        conv(
            reg_pred_layer(level),
            &reg_id,
            box_k.t,
            vec![offset_bias, offset_bias, size, size],
            1,
            0,
            None,
            Branch::Regression,
        ),
    ]
}
