//! Cached-versus-recompute checks: gradient agreement and peak memory.

use std::fmt::Write as _;

use super::Model;
use crate::config::TrainConfig;
use crate::cs::Physics;
use crate::data::synthetic_image;
use crate::error::{Error, Result};
use crate::estimator::GroupId;
use crate::rng::Rng;
use crate::sampler::Couplings;
use crate::tensor::{CacheMode, Gradients, Ledger, Real, Tape, Tensor};

/// Parameter group used in audit reports.
pub fn group_of(name: &str) -> &'static str {
    if name.contains(".inj.") {
        "injectors"
    } else if name.starts_with("schedule.") {
        "schedule"
    } else if name.starts_with("fw.") {
        "step-coupling"
    } else if name.starts_with("est.down.") {
        "est.down"
    } else if name.starts_with("est.mid.") {
        "est.mid"
    } else if name.starts_with("est.up.") {
        "est.up"
    } else {
        "est.other"
    }
}

/// Gives every zero-initialised weight small random values so that all
/// parameters receive gradient, and optionally pins every coupling weight.
pub fn activate<R: Real>(model: &mut Model<R>, rng: &mut Rng, pinned_v: Option<f64>) -> Result<()> {
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id);
        let w_exit = name == "fw.w_0" || name.ends_with(".w_out");
        if name.starts_with("est.out") || name.contains(".inj.c2") || w_exit {
            let scale = if w_exit { 0.25 } else { 0.05 };
            for v in model.params.get_mut(id).data_mut() {
                *v = R::lit(scale * rng.normal::<f64>());
            }
        }
    }
    if let Some(v) = pinned_v {
        let fw = &model.framework;
        if let Some(c) = fw.couplings(&model.params) {
            fw.set_couplings(&mut model.params, &Couplings { v: vec![v; fw.steps()], ..c })?;
        }
        if fw.config().estimator.invertible {
            for g in [GroupId::Down, GroupId::Mid, GroupId::Up] {
                fw.estimator().set_group_coupling(&mut model.params, g, v)?;
            }
        }
    }
    Ok(())
}

fn one_pass<R: Real>(model: &Model<R>, x: &Tensor<R>) -> Result<(Gradients<R>, usize)> {
    let op = model.operator()?;
    let phys = Physics::of_image(&op, x)?;
    let ledger = Ledger::new();
    let mut tape = Tape::with_ledger(&model.params, ledger.clone(), true);
    let mut rng = Rng::derive(model.config.seed, "audit-noise");
    let out = model.framework.reconstruct_var(&mut tape, &phys, Some(&mut rng))?;
    let target = tape.constant(x);
    let loss = tape.l1_mean(&out, &target)?;
    let grads = tape.backward(&loss)?;
    Ok((grads, ledger.report().peak_bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDeviation {
    pub group: String,
    pub params: usize,
    /// `max |g_cached − g_recompute| / max |g_cached|` over the group.
    pub max_rel: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradAudit {
    pub groups: Vec<GroupDeviation>,
}

impl GradAudit {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupDeviation> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14} {:>7} {:>12} {:>12}\n", "group", "params", "max_rel_dev", "max_|grad|");
        for g in &self.groups {
            writeln!(s, "{:<14} {:>7} {:>12.3e} {:>12.3e}", g.group, g.params, g.max_rel, g.max_abs_grad).unwrap();
        }
        s
    }
}

/// One forward/backward from identical parameters with both levels cached,
/// then both levels recomputed, comparing parameter gradients per group.
pub fn grad_equivalence_audit<R: Real>(config: &TrainConfig, pinned_v: Option<f64>) -> Result<GradAudit> {
    let with = |mode| TrainConfig { framework_mode: mode, estimator_mode: mode, ..config.clone() };
    let mut cached = Model::<R>::new(&with(CacheMode::Cached))?;
    activate(&mut cached, &mut Rng::derive(config.seed, "audit-params"), pinned_v)?;
    let mut recompute = Model::<R>::new(&with(CacheMode::Recompute))?;
    recompute.params = cached.params.clone();

    let x: Tensor<R> = synthetic_image(&mut Rng::derive(config.seed, "audit-image"), config.patch).cast();
    let (gc, _) = one_pass(&cached, &x)?;
    let (gr, _) = one_pass(&recompute, &x)?;

    let mut groups: Vec<(GroupDeviation, f64)> = Vec::new();
    for id in cached.params.ids() {
        let name = group_of(cached.params.name(id));
        let (a, b) = match (gc.param(id), gr.param(id)) {
            (Some(a), Some(b)) => (a, b),
            (None, None) => continue,
            _ => return Err(Error::invalid(format!("{} has a gradient in one mode only", cached.params.name(id)))),
        };
        let diff = a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max);
        let mag = a.iter().map(|x| x.f64().abs()).fold(0.0, f64::max);
        let slot = match groups.iter_mut().position(|(g, _)| g.group == name) {
            Some(i) => &mut groups[i],
            None => {
                groups.push((GroupDeviation { group: name.into(), params: 0, max_rel: 0.0, max_abs_grad: 0.0 }, 0.0));
                groups.last_mut().unwrap()
            }
        };
        slot.0.params += a.len();
        slot.0.max_abs_grad = slot.0.max_abs_grad.max(mag);
        slot.1 = slot.1.max(diff);
    }
    let groups = groups
        .into_iter()
        .map(|(mut g, diff)| {
            g.max_rel = if diff == 0.0 { 0.0 } else { diff / g.max_abs_grad.max(f64::MIN_POSITIVE) };
            g
        })
        .collect();
    Ok(GradAudit { groups })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryRow {
    pub steps: usize,
    pub cached_peak_bytes: usize,
    pub recompute_peak_bytes: usize,
}

impl MemoryRow {
    /// `1 − recompute / cached`, in percent.
    pub fn reduction_pct(&self) -> f64 {
        100.0 * (1.0 - self.recompute_peak_bytes as f64 / self.cached_peak_bytes as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySweep {
    pub rows: Vec<MemoryRow>,
}

impl MemorySweep {
    /// Least-squares `cached ≈ intercept + slope·T` and its R².
    pub fn cached_fit(&self) -> (f64, f64, f64) {
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.steps as f64, r.cached_peak_bytes as f64)).collect();
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
        let intercept = my - slope * mx;
        let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
        (intercept, slope, r2)
    }

    /// Reduction of the part of the peak that grows with `T`: the cached
    /// peak minus the fitted intercept, against the recompute peak minus the
    /// same intercept.
    pub fn step_reduction_pct(&self, row: &MemoryRow) -> f64 {
        let (intercept, slope, _) = self.cached_fit();
        100.0 * (1.0 - (row.recompute_peak_bytes as f64 - intercept) / (slope * row.steps as f64))
    }

    /// Relative spread `(max − min) / min` of the recompute peaks.
    pub fn recompute_spread(&self) -> f64 {
        let peaks = self.rows.iter().map(|r| r.recompute_peak_bytes as f64);
        let (lo, hi) = peaks.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p), hi.max(p)));
        (hi - lo) / lo
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,cached_peak_bytes,recompute_peak_bytes,reduction_pct,step_reduction_pct\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.3},{:.3}",
                r.steps,
                r.cached_peak_bytes,
                r.recompute_peak_bytes,
                r.reduction_pct(),
                self.step_reduction_pct(r)
            )
            .unwrap();
        }
        s
    }
}

/// Peak activation bytes of one forward/backward per `T`, with the
/// step-level chain cached and then recomputed. The estimator and its own
/// activation policy stay as configured.
pub fn memory_sweep<R: Real>(config: &TrainConfig, steps: &[usize]) -> Result<MemorySweep> {
    if !config.invertible {
        return Err(Error::Config("the memory sweep needs invertible = true".into()));
    }
    let x: Tensor<R> = synthetic_image(&mut Rng::derive(config.seed, "sweep-image"), config.patch).cast();
    let mut rows = Vec::with_capacity(steps.len());
    for &t in steps {
        let peak = |mode| -> Result<usize> {
            let model = Model::<R>::new(&TrainConfig { steps: t, framework_mode: mode, ..config.clone() })?;
            Ok(one_pass(&model, &x)?.1)
        };
        rows.push(MemoryRow { steps: t, cached_peak_bytes: peak(CacheMode::Cached)?, recompute_peak_bytes: peak(CacheMode::Recompute)? });
    }
    Ok(MemorySweep { rows })
}
