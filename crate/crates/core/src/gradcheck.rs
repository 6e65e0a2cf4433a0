//! Central finite-difference verification of hand-derived gradients.

use serde::Serialize;

use crate::params::ParamSet;

/// Finite-difference step used by the stock checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this in both routes are compared absolutely.
/// Central differences at `FD_STEP` carry up to ~5e-11 of round-off, so a
/// 1e-4 relative error cannot be resolved below this magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    /// Passes when every group's max relative error is strictly below the
    /// tolerance.
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= self.tolerance)
            .map(|g| g.name.as_str())
            .collect()
    }

    /// Merges group reports from another check, prefixing names.
    pub fn merge(mut self, prefix: &str, other: GradCheckReport) -> Self {
        self.groups.extend(other.groups.into_iter().map(|mut g| {
            g.name = format!("{prefix}{}", g.name);
            g
        }));
        self
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>14} {:>14}",
            "group", "entries", "max rel err", "max abs err"
        )?;
        for g in &self.groups {
            let mark = if g.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<24} {:>8} {:>14.3e} {:>14.3e}  {mark}",
                g.name, g.entries, g.max_rel_error, g.max_abs_error
            )?;
        }
        write!(
            f,
            "tolerance {:.1e}: {}",
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// entry by entry for every parameter group.
pub fn check_gradients<P, F>(params: &P, analytic: &P, loss: F, step: f64, tolerance: f64) -> GradCheckReport
where
    P: ParamSet<f64>,
    F: Fn(&P) -> f64,
{
    let base_loss = loss(params);
    let mut probe = params.clone();
    let analytic_views = analytic.views();
    let mut groups = Vec::with_capacity(analytic_views.len());

    for (g, view) in analytic_views.iter().enumerate() {
        let name = view.name.to_string();
        let len = view.data.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for idx in 0..len {
            let orig = probe.views()[g].data[idx];
            set_entry(&mut probe, g, idx, orig + step);
            let plus = loss(&probe);
            set_entry(&mut probe, g, idx, orig - step);
            let minus = loss(&probe);
            set_entry(&mut probe, g, idx, orig);

            let numeric = (plus - minus) / (2.0 * step);
            let a = view.data[idx];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        groups.push(GroupReport {
            name,
            entries: len,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    GradCheckReport {
        tolerance,
        loss: base_loss,
        groups,
    }
}

fn set_entry<P: ParamSet<f64>>(p: &mut P, group: usize, idx: usize, v: f64) {
    let mut views = p.views_mut();
    views[group].1[idx] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamView;

    #[derive(Clone)]
    struct Quad {
        x: Vec<f64>,
    }

    impl ParamSet<f64> for Quad {
        fn views(&self) -> Vec<ParamView<'_, f64>> {
            vec![ParamView {
                name: "x",
                shape: vec![self.x.len()],
                data: &self.x,
            }]
        }
        fn views_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("x", &mut self.x)]
        }
    }

    fn loss(q: &Quad) -> f64 {
        q.x.iter().map(|v| v * v * v).sum()
    }

    #[test]
    fn cubic_gradient_passes_and_flipped_fails() {
        let p = Quad {
            x: vec![0.5, -1.5, 2.0],
        };
        let good = Quad {
            x: p.x.iter().map(|v| 3.0 * v * v).collect(),
        };
        let report = check_gradients(&p, &good, loss, FD_STEP, 1e-6);
        assert!(report.passed(), "{report}");

        let bad = Quad {
            x: good.x.iter().map(|v| -v).collect(),
        };
        assert!(!check_gradients(&p, &bad, loss, FD_STEP, 1e-4).passed());
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let p = Quad { x: vec![0.5] };
        let g = Quad { x: vec![0.75] };
        assert!(!check_gradients(&p, &g, loss, FD_STEP, 0.0).passed());
    }

    #[test]
    fn tiny_gradients_are_compared_against_the_floor() {
        assert!(relative_error(2e-7, 2e-7 + 5e-11) < 1e-4);
        assert!(relative_error(2e-7, 2e-7 + 5e-10) > 1e-4);
        assert!(relative_error(1.0, 1.0 + 5e-11) < 1e-10);
        assert_eq!(relative_error(3.0, 3.0), 0.0);
    }

    #[test]
    fn one_percent_error_on_one_entry_fails() {
        let p = Quad {
            x: vec![0.5, -1.5, 2.0],
        };
        let mut g = Quad {
            x: p.x.iter().map(|v| 3.0 * v * v).collect(),
        };
        g.x[1] *= 1.01;
        let report = check_gradients(&p, &g, loss, FD_STEP, 1e-4);
        assert_eq!(report.failing_groups(), ["x"]);
    }
}
