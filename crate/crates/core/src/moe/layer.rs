//! Forward and backward passes of the MoE block and its NormHead.
//!
//! Per token: `p = softmax(ŝ)`, `o = Σ_{i∈topk(p)} p_i·E_i(h)`,
//! `o' = o + E_share(h)`, `logits = o'·Ŵᵀ` with `Ŵ` the row-normalized head.
//! Gates are taken from the full softmax without renormalization, so the
//! gradient reaches every router logit through the softmax normalizer.

use super::aux_loss::{balance_loss, AuxLossReport};
use super::router::{route, Routing, RouterState};
use super::{AuxCoefficients, ExpertParams, MoeConfig, MoeParams};
use crate::error::{invalid, Error, Result};
use crate::numcore::{dot, RngStream, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn check_finite(t: &Tensor, layer: impl Into<String>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical { layer: layer.into(), detail: "non-finite activations".into() })
    }
}

/// Activations of one expert over the tokens routed to it.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    pub tokens: Vec<usize>,
    x: Tensor,
    a: Tensor,
    b: Tensor,
    g: Tensor,
    m: Tensor,
    pub out: Tensor,
}

fn expert_forward(p: &ExpertParams, x: Tensor, tokens: Vec<usize>) -> Result<ExpertCache> {
    let a = x.matmul(&p.w_gate)?;
    let b = x.matmul(&p.w_up)?;
    let g = a.map(silu);
    let mut m = g.clone();
    for (mv, bv) in m.data_mut().iter_mut().zip(b.data()) {
        *mv *= bv;
    }
    let out = m.matmul(&p.w_down)?;
    Ok(ExpertCache { tokens, x, a, b, g, m, out })
}

/// Accumulates weight gradients into `grad` and returns the input gradient.
fn expert_backward(p: &ExpertParams, c: &ExpertCache, d_out: &Tensor, grad: &mut ExpertParams) -> Result<Tensor> {
    grad.w_down.axpy(1.0, &c.m.t_matmul(d_out)?)?;
    let dm = d_out.matmul_t(&p.w_down)?;
    let mut da = dm.clone();
    let mut db = dm;
    for i in 0..da.len() {
        let dmv = da.data()[i];
        da.data_mut()[i] = dmv * c.b.data()[i] * silu_grad(c.a.data()[i]);
        db.data_mut()[i] = dmv * c.g.data()[i];
    }
    grad.w_gate.axpy(1.0, &c.x.t_matmul(&da)?)?;
    grad.w_up.axpy(1.0, &c.x.t_matmul(&db)?)?;
    let mut dx = da.matmul_t(&p.w_gate)?;
    dx.axpy(1.0, &db.matmul_t(&p.w_up)?)?;
    Ok(dx)
}

fn gather_rows(h: &Tensor, tokens: &[usize]) -> Result<Tensor> {
    let d = h.cols();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(h.row(t));
    }
    Tensor::new(vec![tokens.len(), d], data)
}

/// Everything the block backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    version: u64,
    h: Tensor,
    pub routing: Routing,
    experts: Vec<Option<ExpertCache>>,
    shared: Option<ExpertCache>,
    pub o_prime: Tensor,
    pub report: AuxLossReport,
}

/// MoE block forward: routing, routed experts, shared expert, aux losses.
pub fn moe_forward(
    h: &Tensor,
    params: &MoeParams,
    config: &MoeConfig,
    state: &RouterState,
    rng: &mut RngStream,
) -> Result<(Tensor, AuxLossReport, BlockCache)> {
    let (t, d) = h.dims2()?;
    if d != config.d_model || params.experts.len() != config.n_experts {
        return Err(invalid(format!("input width {d} / config {config:?} mismatch")));
    }
    check_finite(h, "input")?;
    let routing = route(h, &params.router, state, config.k_top, rng)?;

    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); config.n_experts];
    for (tok, sel) in routing.indices.iter().enumerate() {
        for &e in sel {
            per_expert[e].push(tok);
        }
    }

    let mut o = Tensor::zeros(&[t, d]);
    let mut experts = Vec::with_capacity(config.n_experts);
    for (e, tokens) in per_expert.into_iter().enumerate() {
        if tokens.is_empty() {
            experts.push(None);
            continue;
        }
        let x = gather_rows(h, &tokens)?;
        let cache = expert_forward(&params.experts[e], x, tokens)?;
        check_finite(&cache.out, format!("expert.{e}"))?;
        for (row, &tok) in cache.tokens.iter().enumerate() {
            let slot = routing.indices[tok].iter().position(|&i| i == e).expect("routed");
            let gate = routing.gates.get2(tok, slot);
            for (ov, &ev) in o.row_mut(tok).iter_mut().zip(cache.out.row(row)) {
                *ov += gate * ev;
            }
        }
        experts.push(Some(cache));
    }

    let shared = match &params.shared {
        Some(sp) => {
            let cache = expert_forward(sp, h.clone(), (0..t).collect())?;
            check_finite(&cache.out, "shared")?;
            o.axpy(1.0, &cache.out)?;
            Some(cache)
        }
        None => None,
    };

    let (balance, expert_load, mean_gate) = balance_loss(&routing.probs, &routing.indices)?;
    let z = routing.lse.iter().map(|l| l * l).sum::<f64>() / t as f64;
    let report = AuxLossReport { balance_loss: balance, z_loss: z, expert_load, mean_gate };

    let cache = BlockCache {
        version: 0,
        h: h.clone(),
        routing,
        experts,
        shared,
        o_prime: o.clone(),
        report: report.clone(),
    };
    Ok((o, report, cache))
}

/// Row norms of the head; every row must be nonzero.
fn head_row_norms(w_lm: &Tensor) -> Result<Vec<f64>> {
    let (v, _) = w_lm.dims2()?;
    let norms: Vec<f64> = (0..v).map(|r| dot(w_lm.row(r), w_lm.row(r)).sqrt()).collect();
    if let Some(r) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::InvalidParameter(format!("head row {r} has norm {}", norms[r])));
    }
    Ok(norms)
}

fn normalized_head(w_lm: &Tensor, norms: &[f64]) -> Tensor {
    let mut wn = w_lm.clone();
    for (r, &n) in norms.iter().enumerate() {
        wn.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    wn
}

/// `logits[t][v] = ⟨h_t, w_v / ‖w_v‖⟩`.
pub fn normhead_forward(h: &Tensor, w_lm: &Tensor) -> Result<Tensor> {
    let norms = head_row_norms(w_lm)?;
    h.matmul_t(&normalized_head(w_lm, &norms))
}

/// Cache of the block plus head.
#[derive(Clone, Debug)]
pub struct ModelCache {
    pub block: BlockCache,
    head_norms: Vec<f64>,
    head_normed: Tensor,
    pub logits: Tensor,
}

/// Gradients of the total objective.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: MoeParams,
    pub input: Tensor,
}

/// Parameters, router state and a version counter that invalidates caches
/// whenever parameters change.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub config: MoeConfig,
    params: MoeParams,
    pub router: RouterState,
    version: u64,
}

impl MoeModel {
    pub fn new(config: MoeConfig, warmup_horizon: u64, rng: &mut RngStream) -> Result<Self> {
        let params = MoeParams::init(&config, rng)?;
        Ok(Self { config, params, router: RouterState::new(warmup_horizon), version: 0 })
    }

    pub fn from_parts(config: MoeConfig, params: MoeParams, router: RouterState) -> Result<Self> {
        config.validate()?;
        let reference = MoeParams::init(&config, &mut RngStream::new(0, 0))?;
        reference.check_same_layout(&params)?;
        Ok(Self { config, params, router, version: 0 })
    }

    pub fn params(&self) -> &MoeParams {
        &self.params
    }

    /// Mutable access; outstanding forward caches become stale.
    pub fn params_mut(&mut self) -> &mut MoeParams {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: MoeParams) -> Result<()> {
        self.params.check_same_layout(&params)?;
        self.version += 1;
        self.params = params;
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn forward_block(&self, h: &Tensor, rng: &mut RngStream) -> Result<(Tensor, AuxLossReport, BlockCache)> {
        let (o, report, mut cache) = moe_forward(h, &self.params, &self.config, &self.router, rng)?;
        cache.version = self.version;
        Ok((o, report, cache))
    }

    /// Block followed by NormHead.
    pub fn forward(&self, h: &Tensor, rng: &mut RngStream) -> Result<ModelCache> {
        let (o, _, block) = self.forward_block(h, rng)?;
        let head_norms = head_row_norms(&self.params.head)?;
        let head_normed = normalized_head(&self.params.head, &head_norms);
        let logits = o.matmul_t(&head_normed)?;
        check_finite(&logits, "head")?;
        Ok(ModelCache { block, head_norms, head_normed, logits })
    }

    /// Objective `task + λ_bal·L_bal + λ_z·L_z`, given the task loss value.
    pub fn total_loss(task: f64, report: &AuxLossReport, coeffs: AuxCoefficients) -> f64 {
        task + coeffs.balance * report.balance_loss + coeffs.z * report.z_loss
    }

    fn check_cache(&self, cache: &BlockCache) -> Result<()> {
        if cache.version != self.version {
            return Err(invalid(format!(
                "stale cache: forward at parameter version {}, model now at {}",
                cache.version, self.version
            )));
        }
        Ok(())
    }

    /// Gradient of the total objective given `dL_task/d logits`.
    pub fn backward(&self, cache: &ModelCache, d_logits: &Tensor, coeffs: AuxCoefficients) -> Result<Gradients> {
        self.check_cache(&cache.block)?;
        if d_logits.shape() != cache.logits.shape() {
            return Err(invalid("upstream gradient shape mismatch"));
        }
        let o = &cache.block.o_prime;
        let d_o = d_logits.matmul(&cache.head_normed)?;
        let d_wn = d_logits.t_matmul(o)?;
        let mut grads = self.block_backward(&cache.block, &d_o, coeffs)?;
        let head_grad = &mut grads.params.head;
        for (r, &n) in cache.head_norms.iter().enumerate() {
            let wn = cache.head_normed.row(r);
            let g = d_wn.row(r);
            let proj = dot(g, wn);
            for ((out, &gv), &wv) in head_grad.row_mut(r).iter_mut().zip(g).zip(wn) {
                *out = (gv - wv * proj) / n;
            }
        }
        Ok(grads)
    }

    /// Gradient of the block alone given `dL_task/d o'`; the head gradient
    /// is left at zero.
    pub fn block_backward(&self, cache: &BlockCache, d_o: &Tensor, coeffs: AuxCoefficients) -> Result<Gradients> {
        self.check_cache(cache)?;
        let (t, d) = cache.h.dims2()?;
        if d_o.shape() != [t, d] {
            return Err(invalid("upstream gradient shape mismatch"));
        }
        let n = self.config.n_experts;
        let routing = &cache.routing;
        let mut grads = self.params.zeros_like();
        let mut dh = Tensor::zeros(&[t, d]);

        // d total / d p, starting from the balance-loss term.
        let mut dp = Tensor::zeros(&[t, n]);
        if coeffs.balance != 0.0 {
            for r in 0..t {
                for (j, v) in dp.row_mut(r).iter_mut().enumerate() {
                    *v = coeffs.balance * n as f64 * cache.report.expert_load[j] / t as f64;
                }
            }
        }

        for (e, ec) in cache.experts.iter().enumerate() {
            let Some(ec) = ec else { continue };
            let mut d_out = Tensor::zeros(ec.out.shape());
            for (row, &tok) in ec.tokens.iter().enumerate() {
                let slot = routing.indices[tok].iter().position(|&i| i == e).expect("routed");
                let gate = routing.gates.get2(tok, slot);
                let upstream = d_o.row(tok);
                dp.row_mut(tok)[e] += dot(upstream, ec.out.row(row));
                for (dv, &u) in d_out.row_mut(row).iter_mut().zip(upstream) {
                    *dv = gate * u;
                }
            }
            let dx = expert_backward(&self.params.experts[e], ec, &d_out, &mut grads.experts[e])?;
            for (row, &tok) in ec.tokens.iter().enumerate() {
                for (a, &b) in dh.row_mut(tok).iter_mut().zip(dx.row(row)) {
                    *a += b;
                }
            }
        }

        if let (Some(sc), Some(sp), Some(sg)) = (&cache.shared, &self.params.shared, grads.shared.as_mut()) {
            let dx = expert_backward(sp, sc, d_o, sg)?;
            dh.axpy(1.0, &dx)?;
        }

        // softmax backward, plus the z-loss term on the blended logits
        let mut ds = Tensor::zeros(&[t, n]);
        for r in 0..t {
            let p = routing.probs.row(r);
            let g = dp.row(r);
            let inner = dot(p, g);
            let zc = coeffs.z * 2.0 * routing.lse[r] / t as f64;
            for (j, v) in ds.row_mut(r).iter_mut().enumerate() {
                *v = routing.alpha * (p[j] * (g[j] - inner) + zc * p[j]);
            }
        }
        grads.params_router_add(&cache.h.t_matmul(&ds)?)?;
        dh.axpy(1.0, &ds.matmul_t(&self.params.router)?)?;

        Ok(Gradients { params: grads, input: dh })
    }
}

impl MoeParams {
    fn params_router_add(&mut self, g: &Tensor) -> Result<()> {
        self.router.axpy(1.0, g)
    }
}
