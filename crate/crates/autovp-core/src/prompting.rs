//! Input scaling and the trainable frame prompt.
//!
//! A target image is resized into the center of the source model's canvas
//! and the remaining border is filled with a trainable perturbation pushed
//! through a sigmoid:
//!
//! ```text
//! prompted = resize_and_center(x, scale) + mask ⊙ sigmoid(delta)
//! ```
//!
//! The frame width is `p = (source_edge - effective_edge) / 2`, where
//! `effective_edge` is `scale * base_edge` rounded to the nearest even
//! integer so the frame stays symmetric (ties round up). Sampling
//! coordinates inside the frame use the *unrounded* `scale * base_edge`,
//! which keeps the forward pass smooth in `scale` between rounding jumps;
//! the jump itself carries no gradient (straight-through).

use ndarray::{Array3, Array4, ArrayD, Axis, Ix3, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, TensorId, Vjp};
use crate::error::{Error, Result};

/// Smallest effective edge the scaler may produce, in pixels.
pub const MIN_EFFECTIVE_EDGE: usize = 16;

/// How the frame perturbation is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FrameInit {
    /// `delta = 0`, so the initial frame value is `sigmoid(0) = 0.5`.
    #[default]
    MidGray,
    /// Large negative `delta`, giving a frame that starts numerically at
    /// zero while keeping every entry finite.
    NearZero,
}

impl FrameInit {
    fn delta_value(self) -> f64 {
        match self {
            FrameInit::MidGray => 0.0,
            FrameInit::NearZero => -40.0,
        }
    }
}

/// Trainable prompt parameters plus the geometry they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    delta: Array3<f64>,
    scale: f64,
    base_edge: usize,
    source_edge: usize,
    scale_min: f64,
    scale_max: f64,
}

/// Serialization form of [`PromptState`] used by checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptStatePayload {
    pub channels: usize,
    pub base_edge: usize,
    pub source_edge: usize,
    pub scale: f64,
    pub delta: Vec<f64>,
}

impl PromptState {
    /// Create a prompt state with `delta` initialized per `init`.
    ///
    /// `source_edge` must be even (the frame is symmetric) and the scale
    /// bounds are `[MIN_EFFECTIVE_EDGE/base_edge, source_edge/base_edge]`;
    /// an out-of-range initial scale is rejected here, while later updates
    /// clamp instead.
    pub fn new(
        channels: usize,
        base_edge: usize,
        source_edge: usize,
        initial_scale: f64,
        init: FrameInit,
    ) -> Result<Self> {
        if channels == 0 || base_edge == 0 {
            return Err(Error::Geometry(
                "channels and base_edge must be positive".into(),
            ));
        }
        if source_edge % 2 != 0 {
            return Err(Error::Geometry(format!(
                "source_edge must be even for a symmetric frame, got {source_edge}"
            )));
        }
        if source_edge < MIN_EFFECTIVE_EDGE {
            return Err(Error::Geometry(format!(
                "source_edge {source_edge} below the minimum effective edge {MIN_EFFECTIVE_EDGE}"
            )));
        }
        let scale_min = MIN_EFFECTIVE_EDGE as f64 / base_edge as f64;
        let scale_max = source_edge as f64 / base_edge as f64;
        if !(initial_scale.is_finite() && initial_scale >= scale_min && initial_scale <= scale_max)
        {
            return Err(Error::ScaleOutOfRange {
                scale: initial_scale,
                min: scale_min,
                max: scale_max,
            });
        }
        Ok(Self {
            delta: Array3::from_elem(
                (channels, source_edge, source_edge),
                init.delta_value(),
            ),
            scale: initial_scale,
            base_edge,
            source_edge,
            scale_min,
            scale_max,
        })
    }

    pub fn channels(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn base_edge(&self) -> usize {
        self.base_edge
    }

    pub fn source_edge(&self) -> usize {
        self.source_edge
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn scale_bounds(&self) -> (f64, f64) {
        (self.scale_min, self.scale_max)
    }

    pub fn delta(&self) -> &Array3<f64> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut Array3<f64> {
        &mut self.delta
    }

    /// Set the scale, clamping into the valid range (optimizer-step rule).
    pub fn set_scale_clamped(&mut self, scale: f64) {
        self.scale = scale.clamp(self.scale_min, self.scale_max);
    }

    /// Even-rounded edge of the central image region at the current scale.
    pub fn effective_edge(&self) -> usize {
        round_to_even(self.scale * self.base_edge as f64)
            .clamp(MIN_EFFECTIVE_EDGE as i64, self.source_edge as i64) as usize
    }

    /// Frame width `p = (source_edge - effective_edge) / 2`.
    pub fn prompt_width(&self) -> usize {
        (self.source_edge - self.effective_edge()) / 2
    }

    /// Binary frame mask at the current scale.
    pub fn mask(&self) -> PromptMask {
        build_mask(
            self.prompt_width(),
            self.channels(),
            self.source_edge,
            self.source_edge,
        )
        .expect("prompt width derived from a valid state")
    }

    pub fn to_payload(&self) -> PromptStatePayload {
        PromptStatePayload {
            channels: self.channels(),
            base_edge: self.base_edge,
            source_edge: self.source_edge,
            scale: self.scale,
            delta: self.delta.iter().copied().collect(),
        }
    }

    pub fn from_payload(p: &PromptStatePayload) -> Result<Self> {
        let mut state = Self::new(
            p.channels,
            p.base_edge,
            p.source_edge,
            p.scale,
            FrameInit::MidGray,
        )?;
        if p.delta.len() != state.delta.len() {
            return Err(Error::Checkpoint(format!(
                "delta length {} does not match {}x{}x{}",
                p.delta.len(),
                p.channels,
                p.source_edge,
                p.source_edge
            )));
        }
        if p.delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite delta entry".into()));
        }
        state.delta = Array3::from_shape_vec(
            (p.channels, p.source_edge, p.source_edge),
            p.delta.clone(),
        )
        .expect("length checked above");
        Ok(state)
    }
}

/// Nearest even integer; exact odd integers round up.
pub fn round_to_even(x: f64) -> i64 {
    2 * (x / 2.0).round() as i64
}

/// Binary frame mask: 1 on the border of width `prompt_width`, 0 inside.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMask {
    mask: Array3<f64>,
    prompt_width: usize,
}

impl PromptMask {
    pub fn values(&self) -> &Array3<f64> {
        &self.mask
    }

    pub fn prompt_width(&self) -> usize {
        self.prompt_width
    }

    /// Number of 1-entries.
    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Build the frame mask for prompt width `p` on a `c`×`h`×`w` canvas.
///
/// Entry `(c, i, j)` is 1 iff `min(i, j, h-1-i, w-1-j) < p`. Rejects
/// `2p > min(h, w)`, where the frame would cover more than the canvas.
pub fn build_mask(p: usize, c: usize, h: usize, w: usize) -> Result<PromptMask> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Geometry("mask dimensions must be positive".into()));
    }
    if 2 * p > h.min(w) {
        return Err(Error::Geometry(format!(
            "prompt width {p} exceeds half the canvas {}",
            h.min(w)
        )));
    }
    let mut mask = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i.min(j).min(h - 1 - i).min(w - 1 - j) < p {
                    mask[[ch, i, j]] = 1.0;
                }
            }
        }
    }
    Ok(PromptMask {
        mask,
        prompt_width: p,
    })
}

/// Closed-form frame pixel count `2·c·p·(h + w - 2p)`.
pub fn frame_param_count(c: usize, p: usize, h: usize, w: usize) -> usize {
    2 * c * p * (h + w - 2 * p)
}

/// Number of trainable frame parameters at the state's current geometry;
/// always equals the mask popcount.
pub fn prompt_param_count(state: &PromptState) -> usize {
    frame_param_count(
        state.channels(),
        state.prompt_width(),
        state.source_edge(),
        state.source_edge(),
    )
}

// ---------------------------------------------------------------------------
// Differentiable resize
// ---------------------------------------------------------------------------

/// Static geometry of the compose pipeline; the dynamic part (scale) comes
/// from the tape at build time.
#[derive(Debug, Clone, Copy)]
pub struct ComposeGeometry {
    pub channels: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub base_edge: usize,
    pub source_edge: usize,
}

impl ComposeGeometry {
    pub fn for_state(state: &PromptState, target_h: usize, target_w: usize) -> Self {
        Self {
            channels: state.channels(),
            target_h,
            target_w,
            base_edge: state.base_edge(),
            source_edge: state.source_edge(),
        }
    }
}

struct ResizePlan {
    effective_edge: usize,
    offset: usize,
    edge_cont: f64,
}

fn resize_plan(geom: &ComposeGeometry, scale: f64) -> ResizePlan {
    let edge_cont = scale * geom.base_edge as f64;
    let effective_edge = round_to_even(edge_cont)
        .clamp(MIN_EFFECTIVE_EDGE as i64, geom.source_edge as i64) as usize;
    ResizePlan {
        effective_edge,
        offset: (geom.source_edge - effective_edge) / 2,
        edge_cont,
    }
}

/// Bilinear sample position for output index `i` of `out_len` pixels mapped
/// over `in_len` input pixels; `edge` is the (possibly fractional) output
/// edge the coordinates are computed against.
fn sample_coord(i: usize, edge: f64, in_len: usize) -> (f64, bool) {
    let unclamped = (i as f64 + 0.5) * in_len as f64 / edge - 0.5;
    let hi = (in_len - 1) as f64;
    if unclamped < 0.0 {
        (0.0, true)
    } else if unclamped > hi {
        (hi, true)
    } else {
        (unclamped, false)
    }
}

struct Corner {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
}

fn corners(cy: f64, cx: f64, h: usize, w: usize) -> Corner {
    let y0 = cy.floor() as usize;
    let x0 = cx.floor() as usize;
    Corner {
        y0,
        y1: (y0 + 1).min(h - 1),
        x0,
        x1: (x0 + 1).min(w - 1),
        fy: cy - y0 as f64,
        fx: cx - x0 as f64,
    }
}

/// Resize a batch into the center of the source canvas, zero elsewhere.
fn resize_forward(x: &Array4<f64>, geom: &ComposeGeometry, plan: &ResizePlan) -> Array4<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (th, tw) = (geom.target_h, geom.target_w);
    let e = plan.effective_edge;
    let p = plan.offset;
    let mut out = Array4::<f64>::zeros((n, c, geom.source_edge, geom.source_edge));
    for i in 0..e {
        let (cy, _) = sample_coord(i, plan.edge_cont, th);
        for j in 0..e {
            let (cx, _) = sample_coord(j, plan.edge_cont, tw);
            let k = corners(cy, cx, th, tw);
            for b in 0..n {
                for ch in 0..c {
                    let v00 = x[[b, ch, k.y0, k.x0]];
                    let v01 = x[[b, ch, k.y0, k.x1]];
                    let v10 = x[[b, ch, k.y1, k.x0]];
                    let v11 = x[[b, ch, k.y1, k.x1]];
                    out[[b, ch, p + i, p + j]] = v00 * (1.0 - k.fy) * (1.0 - k.fx)
                        + v01 * (1.0 - k.fy) * k.fx
                        + v10 * k.fy * (1.0 - k.fx)
                        + v11 * k.fy * k.fx;
                }
            }
        }
    }
    out
}

/// Adjoint of `resize_forward` w.r.t. the input batch.
fn resize_vjp_input(
    grad_out: &Array4<f64>,
    geom: &ComposeGeometry,
    plan: &ResizePlan,
) -> Array4<f64> {
    let (n, c) = (grad_out.shape()[0], grad_out.shape()[1]);
    let (th, tw) = (geom.target_h, geom.target_w);
    let e = plan.effective_edge;
    let p = plan.offset;
    let mut gx = Array4::<f64>::zeros((n, c, th, tw));
    for i in 0..e {
        let (cy, _) = sample_coord(i, plan.edge_cont, th);
        for j in 0..e {
            let (cx, _) = sample_coord(j, plan.edge_cont, tw);
            let k = corners(cy, cx, th, tw);
            for b in 0..n {
                for ch in 0..c {
                    let g = grad_out[[b, ch, p + i, p + j]];
                    gx[[b, ch, k.y0, k.x0]] += g * (1.0 - k.fy) * (1.0 - k.fx);
                    gx[[b, ch, k.y0, k.x1]] += g * (1.0 - k.fy) * k.fx;
                    gx[[b, ch, k.y1, k.x0]] += g * k.fy * (1.0 - k.fx);
                    gx[[b, ch, k.y1, k.x1]] += g * k.fy * k.fx;
                }
            }
        }
    }
    gx
}

/// Derivative of the resize output w.r.t. the scale parameter, contracted
/// with `grad_out`. Geometry (grid footprint) is held fixed; only the
/// sampling coordinates move, clamped coordinates contribute nothing.
fn resize_vjp_scale(
    grad_out: &Array4<f64>,
    x: &Array4<f64>,
    geom: &ComposeGeometry,
    plan: &ResizePlan,
) -> f64 {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (th, tw) = (geom.target_h, geom.target_w);
    let e = plan.effective_edge;
    let p = plan.offset;
    let ec = plan.edge_cont;
    let mut acc = 0.0;
    for i in 0..e {
        let (cy, clamp_y) = sample_coord(i, ec, th);
        // d cy / d edge_cont, zero where the coordinate was clamped
        let dcy = if clamp_y {
            0.0
        } else {
            -(i as f64 + 0.5) * th as f64 / (ec * ec)
        };
        for j in 0..e {
            let (cx, clamp_x) = sample_coord(j, ec, tw);
            let dcx = if clamp_x {
                0.0
            } else {
                -(j as f64 + 0.5) * tw as f64 / (ec * ec)
            };
            if dcy == 0.0 && dcx == 0.0 {
                continue;
            }
            let k = corners(cy, cx, th, tw);
            for b in 0..n {
                for ch in 0..c {
                    let v00 = x[[b, ch, k.y0, k.x0]];
                    let v01 = x[[b, ch, k.y0, k.x1]];
                    let v10 = x[[b, ch, k.y1, k.x0]];
                    let v11 = x[[b, ch, k.y1, k.x1]];
                    let d_dy = (v10 - v00) * (1.0 - k.fx) + (v11 - v01) * k.fx;
                    let d_dx = (v01 - v00) * (1.0 - k.fy) + (v11 - v10) * k.fy;
                    acc += grad_out[[b, ch, p + i, p + j]] * (d_dy * dcy + d_dx * dcx);
                }
            }
        }
    }
    acc * geom.base_edge as f64
}

fn check_batch_shape(x: &Array4<f64>, geom: &ComposeGeometry) -> Result<()> {
    let shape = x.shape();
    if shape[1] != geom.channels {
        return Err(Error::ShapeMismatch {
            context: "resize_and_center".into(),
            expected: format!("{} channels", geom.channels),
            got: format!("{} channels", shape[1]),
        });
    }
    if shape[2] != shape[3] {
        return Err(Error::Geometry(format!(
            "non-square input {}x{}; square-resize the image first (see data loading)",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// Differentiable resize on the tape. `x` is N×C×Ht×Wt, `scale` a 0-d node;
/// the output is N×C×S×S with the resized image centered and zeros outside.
pub fn resize_center_on_tape(
    tape: &mut Tape,
    x: TensorId,
    scale: TensorId,
    geom: ComposeGeometry,
) -> TensorId {
    let xv = tape
        .value(x)
        .clone()
        .into_dimensionality::<Ix4>()
        .expect("resize input must be N,C,H,W");
    let s = tape.scalar(scale);
    let plan = resize_plan(&geom, s);
    let out = resize_forward(&xv, &geom, &plan);

    let x_geom = geom;
    let x_plan = resize_plan(&geom, s);
    let vjp_x: Vjp = Box::new(move |g: &ArrayD<f64>| {
        let g4 = g.view().into_dimensionality::<Ix4>().expect("grad rank");
        resize_vjp_input(&g4.to_owned(), &x_geom, &x_plan).into_dyn()
    });

    let s_geom = geom;
    let s_plan = resize_plan(&geom, s);
    let x_cap = xv.clone();
    let vjp_s: Vjp = Box::new(move |g: &ArrayD<f64>| {
        let g4 = g.view().into_dimensionality::<Ix4>().expect("grad rank");
        let ds = resize_vjp_scale(&g4.to_owned(), &x_cap, &s_geom, &s_plan);
        ArrayD::from_elem(IxDyn(&[]), ds)
    });

    tape.push_custom(out.into_dyn(), vec![(x, vjp_x), (scale, vjp_s)])
}

/// Full prompted-image composition on the tape:
/// `resize(x, scale) + mask ⊙ sigmoid(delta)` with the mask taken from the
/// current scale value. Returns the N×C×S×S prompted batch.
pub fn compose_batch_on_tape(
    tape: &mut Tape,
    x: TensorId,
    delta: TensorId,
    scale: TensorId,
    geom: ComposeGeometry,
) -> TensorId {
    let s = tape.scalar(scale);
    let plan = resize_plan(&geom, s);
    let mask = build_mask(plan.offset, geom.channels, geom.source_edge, geom.source_edge)
        .expect("offset bounded by source_edge/2")
        .mask;
    let resized = resize_center_on_tape(tape, x, scale, geom);
    let sig = tape.sigmoid(delta);
    let mask_id = tape.leaf(mask.into_dyn());
    let prompt = tape.mul(mask_id, sig);
    tape.add_broadcast(resized, prompt)
}

/// Resize a batch of square images into the center of the canvas (pure
/// forward; see [`resize_center_on_tape`] for the differentiable version).
pub fn resize_and_center_batch(x: &Array4<f64>, state: &PromptState) -> Result<Array4<f64>> {
    let geom = ComposeGeometry::for_state(state, x.shape()[2], x.shape()[3]);
    check_batch_shape(x, &geom)?;
    let plan = resize_plan(&geom, state.scale());
    Ok(resize_forward(x, &geom, &plan))
}

/// Single-image wrapper over [`resize_and_center_batch`].
pub fn resize_and_center(x: &Array3<f64>, state: &PromptState) -> Result<Array3<f64>> {
    let batch = x.clone().insert_axis(Axis(0));
    let out = resize_and_center_batch(&batch, state)?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

/// Prompted batch `resize(x) + mask ⊙ sigmoid(delta)` (pure forward).
pub fn compose_prompted_batch(x: &Array4<f64>, state: &PromptState) -> Result<Array4<f64>> {
    let geom = ComposeGeometry::for_state(state, x.shape()[2], x.shape()[3]);
    check_batch_shape(x, &geom)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().into_dyn());
    let did = tape.leaf(state.delta().clone().into_dyn());
    let sid = tape.scalar_leaf(state.scale());
    let out = compose_batch_on_tape(&mut tape, xid, did, sid, geom);
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<Ix4>()
        .expect("compose output rank"))
}

/// Single-image prompted composition (Eq.-style `x̃ = resize(x) + M ⊙ σ(δ)`).
pub fn compose_prompted_image(x: &Array3<f64>, state: &PromptState) -> Result<Array3<f64>> {
    let batch = x.clone().insert_axis(Axis(0));
    let out = compose_prompted_batch(&batch, state)?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

/// Bilinear square resize of a single C×H×W image to `edge`×`edge`.
/// Aspect ratio is discarded; used to standardize non-square inputs before
/// prompting and for zero-shot evaluation at the backbone's native size.
pub fn square_resize(x: &Array3<f64>, edge: usize) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == edge && w == edge {
        return x.clone();
    }
    let mut out = Array3::<f64>::zeros((c, edge, edge));
    for i in 0..edge {
        let (cy, _) = sample_coord(i, edge as f64, h);
        for j in 0..edge {
            let (cx, _) = sample_coord(j, edge as f64, w);
            let k = corners(cy, cx, h, w);
            for ch in 0..c {
                out[[ch, i, j]] = x[[ch, k.y0, k.x0]] * (1.0 - k.fy) * (1.0 - k.fx)
                    + x[[ch, k.y0, k.x1]] * (1.0 - k.fy) * k.fx
                    + x[[ch, k.y1, k.x0]] * k.fy * (1.0 - k.fx)
                    + x[[ch, k.y1, k.x1]] * k.fy * k.fx;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::numeric_gradient;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen::<f64>())
    }

    // Independent frame count: walk every pixel and classify it by hand.
    fn enumerate_frame_pixels(p: usize, c: usize, h: usize, w: usize) -> usize {
        let mut count = 0;
        for _ in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let border = i < p || j < p || i >= h - p || j >= w - p;
                    if border {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn mask_p0_is_all_zero() {
        let mask = build_mask(0, 3, 224, 224).unwrap();
        assert_eq!(mask.popcount(), 0);
    }

    #[test]
    fn mask_p48_popcount_matches_formula_and_enumeration() {
        let mask = build_mask(48, 3, 224, 224).unwrap();
        // 2*3*48*(224+224-96) = 101,376, confirmed by pixel enumeration.
        assert_eq!(enumerate_frame_pixels(48, 3, 224, 224), 101_376);
        assert_eq!(mask.popcount(), 101_376);
        assert_eq!(frame_param_count(3, 48, 224, 224), 101_376);
    }

    #[test]
    fn mask_p112_covers_everything() {
        let mask = build_mask(112, 3, 224, 224).unwrap();
        assert_eq!(mask.popcount(), 3 * 224 * 224);
        assert!(mask.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_rejects_frame_wider_than_canvas() {
        assert!(build_mask(113, 3, 224, 224).is_err());
    }

    #[test]
    fn popcount_equals_formula_for_all_widths() {
        for p in 0..=16 {
            let mask = build_mask(p, 2, 32, 32).unwrap();
            assert_eq!(
                mask.popcount(),
                frame_param_count(2, p, 32, 32),
                "p={p}"
            );
            assert_eq!(mask.popcount(), enumerate_frame_pixels(p, 2, 32, 32));
        }
    }

    #[test]
    fn paper_scales_give_expected_prompt_widths() {
        for (scale, edge, p) in [(0.5, 64, 80), (1.0, 128, 48), (1.5, 192, 16)] {
            let state = PromptState::new(3, 128, 224, scale, FrameInit::MidGray).unwrap();
            assert_eq!(state.effective_edge(), edge, "scale {scale}");
            assert_eq!(state.prompt_width(), p, "scale {scale}");
        }
    }

    #[test]
    fn param_count_examples() {
        let mk = |scale| PromptState::new(3, 128, 224, scale, FrameInit::MidGray).unwrap();
        // p=16: 2*3*16*416 = 39,936; p=80: 2*3*80*288 = 138,240.
        assert_eq!(prompt_param_count(&mk(1.5)), 39_936);
        assert_eq!(prompt_param_count(&mk(0.5)), 138_240);
        assert_eq!(prompt_param_count(&mk(224.0 / 128.0)), 0);
        for scale in [0.5, 0.77, 1.0, 1.31, 1.5] {
            let state = mk(scale);
            assert_eq!(prompt_param_count(&state), state.mask().popcount());
        }
    }

    #[test]
    fn scale_outside_bounds_rejected_at_construction() {
        assert!(PromptState::new(3, 128, 224, 0.05, FrameInit::MidGray).is_err());
        assert!(PromptState::new(3, 128, 224, 2.0, FrameInit::MidGray).is_err());
        let mut state = PromptState::new(3, 128, 224, 1.0, FrameInit::MidGray).unwrap();
        state.set_scale_clamped(9.0);
        assert_eq!(state.scale(), 224.0 / 128.0);
    }

    #[test]
    fn increasing_scale_shrinks_frame_until_zero() {
        let mut widths = Vec::new();
        for step in 0..=7 {
            let scale = 0.5 + step as f64 * 0.25; // even-edge changes every step
            let state = PromptState::new(3, 128, 224, scale.min(1.75), FrameInit::MidGray).unwrap();
            widths.push(state.prompt_width());
        }
        for pair in widths.windows(2) {
            if pair[0] > 0 {
                assert!(pair[1] < pair[0], "{widths:?}");
            } else {
                assert_eq!(pair[1], 0);
            }
        }
    }

    #[test]
    fn constant_image_resizes_to_constant_center() {
        let state = PromptState::new(3, 128, 224, 1.0, FrameInit::MidGray).unwrap();
        let x = Array3::from_elem((3, 128, 128), 0.7);
        let out = resize_and_center(&x, &state).unwrap();
        let p = state.prompt_width();
        assert_eq!(p, 48);
        for ch in 0..3 {
            for i in 0..224 {
                for j in 0..224 {
                    let inside = i >= p && i < 224 - p && j >= p && j < 224 - p;
                    let v = out[[ch, i, j]];
                    if inside {
                        assert!((v - 0.7).abs() < 1e-12, "center {i},{j} = {v}");
                    } else {
                        assert_eq!(v, 0.0, "frame {i},{j}");
                    }
                }
            }
        }
    }

    #[test]
    fn non_square_input_rejected() {
        let state = PromptState::new(3, 16, 32, 1.0, FrameInit::MidGray).unwrap();
        let x = Array4::<f64>::zeros((1, 3, 16, 20));
        assert!(resize_and_center_batch(&x, &state).is_err());
    }

    #[test]
    fn zero_delta_gives_mid_gray_frame() {
        let state = PromptState::new(3, 16, 32, 1.0, FrameInit::MidGray).unwrap();
        let x = random_image(3, 16, 16, 1);
        let out = compose_prompted_image(&x, &state).unwrap();
        let mask = state.mask();
        for ((c, i, j), &m) in mask.values().indexed_iter() {
            if m == 1.0 {
                assert_eq!(out[[c, i, j]], 0.5);
            }
        }
    }

    #[test]
    fn near_zero_init_frame_is_numerically_zero() {
        let state = PromptState::new(3, 16, 32, 1.0, FrameInit::NearZero).unwrap();
        let x = random_image(3, 16, 16, 2);
        let out = compose_prompted_image(&x, &state).unwrap();
        let resized = resize_and_center(&x, &state).unwrap();
        for (o, r) in out.iter().zip(resized.iter()) {
            assert!((o - r).abs() < 1e-15);
        }
    }

    #[test]
    fn composition_matches_disjoint_two_pass_oracle() {
        // Oracle: write the resized image and the sigmoid frame into
        // disjoint index sets of a fresh canvas, then demand bit equality.
        let mut state = PromptState::new(3, 128, 224, 1.0, FrameInit::MidGray).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        state
            .delta_mut()
            .mapv_inplace(|_| rng.gen::<f64>() * 4.0 - 2.0);
        let x = random_image(3, 128, 128, 3);

        let out = compose_prompted_image(&x, &state).unwrap();

        let resized = resize_and_center(&x, &state).unwrap();
        let mask = state.mask();
        assert_eq!(mask.prompt_width(), 48);
        let mut oracle = Array3::<f64>::zeros((3, 224, 224));
        for ((c, i, j), &m) in mask.values().indexed_iter() {
            oracle[[c, i, j]] = if m == 1.0 {
                1.0 / (1.0 + (-state.delta()[[c, i, j]]).exp())
            } else {
                resized[[c, i, j]]
            };
        }
        assert_eq!(out, oracle, "central region and frame must be bit-exact");
    }

    #[test]
    fn frame_pixels_lie_strictly_inside_unit_interval() {
        let mut state = PromptState::new(3, 16, 32, 1.0, FrameInit::MidGray).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        state
            .delta_mut()
            .mapv_inplace(|_| rng.gen::<f64>() * 30.0 - 15.0);
        let x = random_image(3, 16, 16, 4);
        let out = compose_prompted_image(&x, &state).unwrap();
        for ((c, i, j), &m) in state.mask().values().indexed_iter() {
            if m == 1.0 {
                let v = out[[c, i, j]];
                assert!(v > 0.0 && v < 1.0, "frame pixel {v}");
            }
        }
    }

    #[test]
    fn mask_times_resized_is_zero_everywhere() {
        for scale in [0.55, 1.0, 1.4] {
            let state = PromptState::new(3, 16, 32, scale, FrameInit::MidGray).unwrap();
            let x = random_image(3, 16, 16, 5);
            let resized = resize_and_center(&x, &state).unwrap();
            let mask = state.mask();
            let product = mask.values() * &resized;
            assert!(product.iter().all(|&v| v == 0.0), "scale {scale}");
        }
    }

    fn compose_loss(delta_flat: &[f64], scale: f64, x: &Array4<f64>) -> f64 {
        // Scalar probe loss: weighted sum of the prompted image, used by the
        // finite-difference oracles below.
        let geom = ComposeGeometry {
            channels: 1,
            target_h: x.shape()[2],
            target_w: x.shape()[3],
            base_edge: 8,
            source_edge: 16,
        };
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone().into_dyn());
        let did = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 16, 16]), delta_flat.to_vec()).unwrap(),
        );
        let sid = tape.scalar_leaf(scale);
        let out = compose_batch_on_tape(&mut tape, xid, did, sid, geom);
        // deterministic pixel weights keep the probe sensitive everywhere
        let weights: Vec<f64> = (0..tape.value(out).len())
            .map(|i| ((i % 17) as f64 - 8.0) / 10.0)
            .collect();
        let wid = tape.leaf(ArrayD::from_shape_vec(tape.value(out).raw_dim(), weights).unwrap());
        let prod = tape.mul(out, wid);
        let flat = tape.flatten_batch(prod);
        tape.value(flat).sum()
    }

    // Analytic (delta_grad, scale_grad) of the probe loss via the tape.
    fn compose_loss_grads(
        delta_flat: &[f64],
        scale: f64,
        x: &Array4<f64>,
    ) -> (Vec<f64>, f64) {
        let geom = ComposeGeometry {
            channels: 1,
            target_h: x.shape()[2],
            target_w: x.shape()[3],
            base_edge: 8,
            source_edge: 16,
        };
        let mut t = Tape::new();
        let xid = t.leaf(x.clone().into_dyn());
        let did = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 16, 16]), delta_flat.to_vec()).unwrap());
        let sid = t.scalar_leaf(scale);
        let out = compose_batch_on_tape(&mut t, xid, did, sid, geom);
        let weights: Vec<f64> = (0..t.value(out).len())
            .map(|i| ((i % 17) as f64 - 8.0) / 10.0)
            .collect();
        let wid = t.leaf(ArrayD::from_shape_vec(t.value(out).raw_dim(), weights).unwrap());
        let prod = t.mul(out, wid);
        let loss = t.sum_all(prod);
        let grads = t.backward(loss);
        let dg = grads.get(did).unwrap().iter().copied().collect();
        let sg = grads.get(sid).unwrap().iter().next().copied().unwrap();
        (dg, sg)
    }

    #[test]
    fn delta_gradient_matches_finite_differences() {
        let x = random_image(1, 12, 12, 6).insert_axis(Axis(0));
        let scale = 1.13;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let delta0: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() - 0.5).collect();

        let (analytic, _) = compose_loss_grads(&delta0, scale, &x);
        let numeric = numeric_gradient(|d| compose_loss(d, scale, &x), &delta0, 1e-3);
        for (a, nmr) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(nmr.abs());
            if denom > 1e-7 {
                assert!(
                    ((a - nmr).abs() / denom) < 1e-4,
                    "delta grad analytic {a} vs numeric {nmr}"
                );
            }
        }
    }

    #[test]
    fn scale_gradient_matches_finite_differences() {
        let x = random_image(1, 12, 12, 9).insert_axis(Axis(0));
        let scale = 1.13; // generic: even-rounded edge stable under ±1e-3
        let delta0 = vec![0.25; 256];

        let (_, analytic) = compose_loss_grads(&delta0, scale, &x);
        let numeric = numeric_gradient(|s| compose_loss(&delta0, s[0], &x), &[scale], 1e-3)[0];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            (analytic - numeric).abs() / denom < 1e-4,
            "scale grad analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn square_resize_identity_on_matching_edge() {
        let x = random_image(3, 16, 16, 10);
        assert_eq!(square_resize(&x, 16), x);
    }
}
