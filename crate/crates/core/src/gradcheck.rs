//! Central finite-difference verification of analytic gradients.

use crate::nn::Params;

/// Agreement between an analytic gradient and central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over every parameter.
    pub relative_error: f64,
    /// Largest per-entry `|g − ĝ| / max(|g|, |ĝ|, floor)`.
    pub max_entry_error: f64,
    pub entries: usize,
    /// Entries whose one-sided slopes disagreed (a ReLU or max kink inside
    /// `[θ − h, θ + h]`) and were re-measured with a smaller step.
    pub refined: usize,
}

/// Compares `analytic` with `(f(θ + h) − f(θ − h)) / 2h`, perturbing every
/// entry of `params` in turn. `floor` keeps near-zero entries from
/// dominating the per-entry ratio.
///
/// Piecewise-linear activations make the loss non-differentiable on a set
/// of measure zero, and a perturbation of size `h` occasionally straddles
/// one. Such entries are recognised by their forward and backward slopes
/// disagreeing and are measured again with steps `h / 100` and `h / 10⁴`.
pub fn check_gradient<P: Params>(params: &P, analytic: &P, step: f64, floor: f64, f: impl Fn(&P) -> f64) -> GradCheck {
    let mut work = params.clone();
    let centre = f(params);
    let (mut diff2, mut a2, mut n2, mut worst, mut entries, mut refined) = (0.0, 0.0, 0.0, 0.0f64, 0, 0);
    let analytic = analytic.tensors();
    for t in 0..analytic.len() {
        for i in 0..analytic[t].data.len() {
            let mut h = step;
            let mut numeric = 0.0;
            for attempt in 0..3 {
                let (up, down) = probe(&mut work, t, i, h, &f);
                numeric = (up - down) / (2.0 * h);
                let (ahead, behind) = ((up - centre) / h, (centre - down) / h);
                if (ahead - behind).abs() <= KINK_TOLERANCE * ahead.abs().max(behind.abs()).max(floor) {
                    break;
                }
                if attempt == 0 {
                    refined += 1;
                }
                h /= 100.0;
            }
            let a = analytic[t].data[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            entries += 1;
        }
    }
    let scale = libm::sqrt(a2).max(libm::sqrt(n2));
    let relative_error = if scale == 0.0 { 0.0 } else { libm::sqrt(diff2) / scale };
    GradCheck { relative_error, max_entry_error: worst, entries, refined }
}

/// Relative disagreement between one-sided slopes treated as a kink.
const KINK_TOLERANCE: f64 = 1e-3;

/// `f` at entry `(t, i)` moved by `+h` and `−h`, restoring the entry after.
fn probe<P: Params>(work: &mut P, t: usize, i: usize, h: f64, f: &impl Fn(&P) -> f64) -> (f64, f64) {
    let orig = work.tensors()[t].data[i];
    work.tensors_mut()[t].data[i] = orig + h;
    let up = f(work);
    work.tensors_mut()[t].data[i] = orig - h;
    let down = f(work);
    work.tensors_mut()[t].data[i] = orig;
    (up, down)
}
