//! Analytic-versus-finite-difference gradient checks for the full model.

use serde::{Deserialize, Serialize};

use super::config::GradCheckConfig;
use crate::error::{invalid, Error, Result};
use crate::moe::{AuxCoefficients, MoeModel, MoeParams, Targets};
use crate::numcore::{finite_diff_grad, relative_error, RngState, RngStream, StreamKind, Tensor};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

/// Total objective of `model` with `params` substituted, replaying the
/// routing-noise stream from `noise`.
pub fn objective(
    model: &MoeModel,
    params: &MoeParams,
    h: &Tensor,
    targets: &Targets,
    noise: RngState,
    coeffs: AuxCoefficients,
) -> Result<f64> {
    let mut m = model.clone();
    m.set_params(params.clone())?;
    let cache = m.forward(h, &mut RngStream::restore(noise))?;
    let (task, _) = targets.loss(&cache.logits)?;
    Ok(MoeModel::total_loss(task, &cache.block.report, coeffs))
}

/// Compares every parameter tensor and the input gradient against central
/// finite differences. `corrupt` perturbs the named analytic group before
/// comparison (fault injection for testing the checker itself).
pub fn check_gradients(
    model: &MoeModel,
    h: &Tensor,
    targets: &Targets,
    noise: RngState,
    coeffs: AuxCoefficients,
    corrupt: Option<&str>,
) -> Result<Vec<GroupReport>> {
    let cache = model.forward(h, &mut RngStream::restore(noise))?;
    let (_, d_logits) = targets.loss(&cache.logits)?;
    let mut grads = model.backward(&cache, &d_logits, coeffs)?;

    let names = model.params().names();
    if let Some(target) = corrupt {
        if let Some(i) = names.iter().position(|n| n == target) {
            grads.params.tensors_mut()[i].data_mut()[0] += 1.0;
        } else if target == "input" {
            grads.input.data_mut()[0] += 1.0;
        }
    }

    let mut reports = Vec::with_capacity(names.len() + 1);
    let analytic = grads.params.tensors();
    for (i, name) in names.iter().enumerate() {
        let base = model.params().clone();
        let x = base.tensors()[i].clone();
        let fd = finite_diff_grad(
            |probe| {
                let mut p = base.clone();
                *p.tensors_mut()[i] = probe.clone();
                objective(model, &p, h, targets, noise, coeffs).unwrap_or(f64::NAN)
            },
            &x,
            None,
        )?;
        let err = relative_error(analytic[i], &fd);
        reports.push(GroupReport { name: name.clone(), rel_error: err, passed: err < GRAD_CHECK_TOLERANCE });
    }

    let fd = finite_diff_grad(
        |probe| objective(model, model.params(), probe, targets, noise, coeffs).unwrap_or(f64::NAN),
        h,
        None,
    )?;
    let err = relative_error(&grads.input, &fd);
    reports.push(GroupReport { name: "input".into(), rel_error: err, passed: err < GRAD_CHECK_TOLERANCE });
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: u64,
    pub param_count: usize,
    pub tolerance: f64,
    pub groups: Vec<GroupSummary>,
    pub passed: bool,
}

/// Largest parameter count the finite-difference runner accepts.
pub const MAX_CHECK_PARAMS: usize = 1000;

/// Random small instance `i`: router mid-warmup with statistics observed
/// from the instance's own logits; regression targets on even instances and
/// class labels on odd ones.
pub fn check_instance(cfg: &GradCheckConfig, seed: u64, i: u32) -> Result<(MoeModel, Tensor, Targets, RngState)> {
    let mut model = MoeModel::new(cfg.model.clone(), cfg.router_warmup, &mut RngStream::named(seed, StreamKind::Init, i))?;
    let mut rng = RngStream::named(seed, StreamKind::Data, i);
    let h = Tensor::from_fn(&[cfg.tokens, cfg.model.d_model], |_| rng.normal());
    model.router.observe_logits(&h.matmul(&model.params().router)?);
    model.router.global_step = cfg.router_step;
    let targets = if i % 2 == 0 {
        Targets::Regression(Tensor::from_fn(&[cfg.tokens, cfg.model.vocab], |_| rng.normal()))
    } else {
        Targets::Classes((0..cfg.tokens).map(|_| rng.below(cfg.model.vocab)).collect())
    };
    Ok((model, h, targets, RngStream::named(seed, StreamKind::RoutingNoise, i).state()))
}

/// Checks every parameter group on `cfg.instances` instances. `corrupt`
/// names a group whose analytic gradient is perturbed (checker self-test).
pub fn run_grad_check(cfg: &GradCheckConfig, seed: u64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    cfg.model.validate()?;
    let param_count = cfg.model.param_count();
    if param_count > MAX_CHECK_PARAMS {
        return Err(invalid(format!("grad check needs at most {MAX_CHECK_PARAMS} parameters, model has {param_count}")));
    }
    if cfg.instances == 0 || cfg.tokens == 0 {
        return Err(invalid("grad check needs at least one instance and token"));
    }
    let mut groups: Vec<GroupSummary> = Vec::new();
    for i in 0..cfg.instances {
        let i = u32::try_from(i).map_err(|_| invalid("too many instances"))?;
        let (model, h, targets, noise) = check_instance(cfg, seed, i)?;
        for r in check_gradients(&model, &h, &targets, noise, cfg.aux, corrupt)? {
            match groups.iter_mut().find(|g| g.name == r.name) {
                Some(g) => {
                    g.max_rel_error = g.max_rel_error.max(r.rel_error);
                    g.passed &= r.passed;
                }
                None => groups.push(GroupSummary { name: r.name, max_rel_error: r.rel_error, passed: r.passed }),
            }
        }
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport { instances: cfg.instances, param_count, tolerance: GRAD_CHECK_TOLERANCE, groups, passed })
}

/// Failing group names of a report as an oracle error, if any.
pub fn report_failures(report: &GradCheckReport) -> Result<()> {
    let failed: Vec<&str> = report.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Oracle(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeConfig;

    #[test]
    fn default_small_config_passes() {
        let report = run_grad_check(&GradCheckConfig::default(), 0, None).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.param_count <= MAX_CHECK_PARAMS);
        assert!(report.groups.iter().any(|g| g.name == "router"));
        report_failures(&report).unwrap();
    }

    #[test]
    fn corrupted_group_is_named() {
        let cfg = GradCheckConfig { instances: 2, ..GradCheckConfig::default() };
        let report = run_grad_check(&cfg, 0, Some("head")).unwrap();
        let failed: Vec<_> = report.groups.iter().filter(|g| !g.passed).map(|g| g.name.clone()).collect();
        assert_eq!(failed, ["head"]);
        assert!(matches!(report_failures(&report), Err(Error::Oracle(m)) if m.contains("head")));
    }

    #[test]
    fn oversized_model_rejected() {
        let cfg = GradCheckConfig { model: MoeConfig::default(), ..GradCheckConfig::default() };
        assert!(run_grad_check(&cfg, 0, None).is_err());
    }
}
