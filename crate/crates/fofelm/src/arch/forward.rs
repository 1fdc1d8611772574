//! Forward passes. A [`GraphRun`] wraps a per-batch tape, inserts each model
//! parameter as a leaf exactly once (so the tied embedding accumulates
//! gradient from both its input and output uses), and harvests leaf
//! gradients back into the model's accumulators after the backward sweep.

use super::{AdapterPlacement, ModelGraph, RoutingKey, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use std::collections::{BTreeMap, BTreeSet};

/// One forward/backward execution over a batch.
pub struct GraphRun {
    pub tape: Tape,
    leaves: BTreeMap<(usize, usize), Var>,
    training: bool,
}

impl GraphRun {
    pub fn training() -> Self {
        GraphRun {
            tape: Tape::new(),
            leaves: BTreeMap::new(),
            training: true,
        }
    }

    /// No gradient bookkeeping; cheaper for evaluation and benchmarks.
    pub fn inference() -> Self {
        GraphRun {
            tape: Tape::inference(),
            leaves: BTreeMap::new(),
            training: false,
        }
    }

    /// Insert (or reuse) the leaf for a model parameter.
    pub fn param(&mut self, model: &ModelGraph, group: usize, tensor: usize) -> Var {
        if let Some(&v) = self.leaves.get(&(group, tensor)) {
            return v;
        }
        let g = &model.groups()[group];
        let rg = self.training && g.trainable;
        let v = self.tape.leaf(g.tensors[tensor].clone(), rg);
        self.leaves.insert((group, tensor), v);
        v
    }

    pub fn param_named(&mut self, model: &ModelGraph, name: &str, tensor: usize) -> Result<Var> {
        let gi = model.group_index(name)?;
        Ok(self.param(model, gi, tensor))
    }

    /// Insert a non-parameter input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value, false)
    }

    /// Parameters that participated in this graph.
    pub fn touched(&self) -> BTreeSet<(usize, usize)> {
        self.leaves.keys().copied().collect()
    }

    /// Add the tape's leaf gradients into the model accumulators.
    /// Frozen groups were inserted without gradient tracking, so their
    /// accumulators stay exactly zero.
    pub fn harvest(&self, model: &mut ModelGraph) {
        for (&(gi, ti), &var) in &self.leaves {
            if let Some(g) = self.tape.grad(var) {
                model.groups_mut()[gi].tensors[ti].accumulate_grad(g);
            }
        }
    }
}

/// History bags for one batch: per row, the (token, coefficient) pairs of the
/// encoded context.
pub type ContextBatch = Vec<Vec<(usize, f64)>>;

impl ModelGraph {
    /// Compute logits for a batch of encoded histories. `key` selects the
    /// active sub-network and adapters; plain MIXTURE ignores it, every other
    /// variant requires it.
    pub fn forward(
        &self,
        run: &mut GraphRun,
        contexts: &ContextBatch,
        key: Option<RoutingKey>,
    ) -> Result<Var> {
        match self.config().variant {
            Variant::Mixture | Variant::MixtureA => self.forward_mixture(run, contexts, key),
            Variant::Ad | Variant::AdA | Variant::AdDa => self.forward_ad(run, contexts, key),
            Variant::AdCaaDa => self.forward_ad_caa_da(run, contexts, key),
        }
    }

    fn require_key(&self, key: Option<RoutingKey>) -> Result<(String, String)> {
        let key = key.ok_or_else(|| {
            Error::Routing(format!(
                "variant {} requires a routing key",
                self.config().variant.name()
            ))
        })?;
        let cfg = self.config();
        let dialect = cfg
            .dialects
            .get(key.dialect)
            .ok_or_else(|| Error::Routing(format!("dialect index {} out of range", key.dialect)))?
            .clone();
        let application = cfg
            .applications
            .get(key.application)
            .ok_or_else(|| {
                Error::Routing(format!(
                    "application index {} out of range",
                    key.application
                ))
            })?
            .clone();
        Ok((dialect, application))
    }

    /// Stack of L feedforward layers (ReLU after each); `site_hook` may wrap
    /// each post-activation value, keyed by the layer index.
    fn ff_layers(
        &self,
        run: &mut GraphRun,
        group: usize,
        layers: usize,
        x: Var,
        mut site_hook: impl FnMut(&Self, &mut GraphRun, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut h = x;
        for l in 0..layers {
            let w = run.param(self, group, 2 * l);
            let b = run.param(self, group, 2 * l + 1);
            let z = run.tape.matmul(h, w)?;
            let z = run.tape.add_row(z, b)?;
            h = run.tape.relu(z)?;
            h = site_hook(self, run, l, h)?;
        }
        Ok(h)
    }

    /// Bottleneck branch without the residual: up(relu(down(x))).
    fn adapter_bottleneck(&self, run: &mut GraphRun, group: usize, x: Var) -> Result<Var> {
        let down_w = run.param(self, group, 0);
        let down_b = run.param(self, group, 1);
        let up_w = run.param(self, group, 2);
        let up_b = run.param(self, group, 3);
        let z = run.tape.matmul(x, down_w)?;
        let z = run.tape.add_row(z, down_b)?;
        let r = run.tape.relu(z)?;
        let u = run.tape.matmul(r, up_w)?;
        run.tape.add_row(u, up_b)
    }

    /// Full adapter: x + up(relu(down(x))). With a zero-initialized
    /// up-projection this is exactly the identity.
    fn adapter_residual(&self, run: &mut GraphRun, group: usize, x: Var) -> Result<Var> {
        let branch = self.adapter_bottleneck(run, group, x)?;
        run.tape.add(x, branch)
    }

    fn maybe_adapter(
        &self,
        run: &mut GraphRun,
        dialect: Option<&str>,
        site: &str,
        x: Var,
    ) -> Result<Var> {
        match dialect {
            Some(dl) => {
                let gi = self.group_index(&format!("dialect:{dl}:adapter:{site}"))?;
                self.adapter_residual(run, gi, x)
            }
            None => Ok(x),
        }
    }

    /// Mixture family: N parallel blocks over the encoded context, the
    /// mixture stack emits normalized weights for the other N−1 blocks, and
    /// the weighted combination feeds the projection and the tied output.
    fn forward_mixture(
        &self,
        run: &mut GraphRun,
        contexts: &ContextBatch,
        key: Option<RoutingKey>,
    ) -> Result<Var> {
        let cfg = self.config();
        let placement = cfg.effective_placement();
        let dialect = if cfg.variant == Variant::MixtureA {
            Some(self.require_key(key)?.0)
        } else {
            None
        };
        let dl = dialect.as_deref();
        let (n, l) = (cfg.num_blocks, cfg.layers_per_block);

        let per_layer = matches!(
            placement,
            Some(AdapterPlacement::EveryHidden | AdapterPlacement::EveryHiddenPlusProjection)
        );
        let last_hidden = matches!(
            placement,
            Some(AdapterPlacement::LastHidden | AdapterPlacement::Both)
        );
        let pre_projection = matches!(
            placement,
            Some(
                AdapterPlacement::BeforeProjection
                    | AdapterPlacement::Both
                    | AdapterPlacement::EveryHiddenPlusProjection
            )
        );

        let emb = run.param_named(self, "embedding", 0)?;
        let x = run.tape.embed_bag(emb, contexts.clone())?;

        let mut features = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let gi = self.group_index(&format!("block:{i}"))?;
            let mut f = self.ff_layers(run, gi, l, x, |m, run, layer, h| {
                if per_layer {
                    m.maybe_adapter(run, dl, &format!("block:{i}:layer:{layer}"), h)
                } else {
                    Ok(h)
                }
            })?;
            if last_hidden {
                f = self.maybe_adapter(run, dl, &format!("block:{i}:out"), f)?;
            }
            features.push(f);
        }

        let mix_gi = self.group_index("mixture")?;
        let mut m = self.ff_layers(run, mix_gi, l, x, |mg, run, layer, h| {
            if per_layer {
                mg.maybe_adapter(run, dl, &format!("mixture:layer:{layer}"), h)
            } else {
                Ok(h)
            }
        })?;
        if last_hidden {
            m = self.maybe_adapter(run, dl, "mixture:out", m)?;
        }
        let head_w = run.param(self, mix_gi, 2 * l);
        let head_b = run.param(self, mix_gi, 2 * l + 1);
        let wl = run.tape.matmul(m, head_w)?;
        let wl = run.tape.add_row(wl, head_b)?;
        let weights = run.tape.softmax_rows(wl)?;

        let mut mixed: Option<Var> = None;
        for (i, &f) in features.iter().enumerate() {
            let wi = run.tape.col(weights, i)?;
            let term = run.tape.scale_rows(f, wi)?;
            mixed = Some(match mixed {
                Some(acc) => run.tape.add(acc, term)?,
                None => term,
            });
        }
        let mut mixed = mixed.expect("at least one feature block");

        if pre_projection {
            mixed = self.maybe_adapter(run, dl, "pre_projection", mixed)?;
        }

        self.project_tied(run, "projection", mixed, emb)
    }

    /// Application-dependent family (AD, AD_A, AD_DA): only the routed
    /// sub-network, its head, and its adapters enter the graph.
    fn forward_ad(
        &self,
        run: &mut GraphRun,
        contexts: &ContextBatch,
        key: Option<RoutingKey>,
    ) -> Result<Var> {
        let cfg = self.config();
        let (dl, app) = self.require_key(key)?;
        let l = cfg.layers_per_block;

        let emb = run.param_named(self, "embedding", 0)?;
        let x = run.tape.embed_bag(emb, contexts.clone())?;

        let (subnet_name, head_name) = match cfg.variant {
            Variant::Ad | Variant::AdA => {
                (format!("subnet:{dl}:{app}"), format!("head:{dl}:{app}"))
            }
            Variant::AdDa => (format!("subnet:{app}"), format!("head:{app}")),
            other => {
                return Err(Error::Internal(format!(
                    "forward_ad called on {}",
                    other.name()
                )))
            }
        };
        let subnet = self.group_index(&subnet_name)?;
        let mut h = self.ff_layers(run, subnet, l, x, |_, _, _, v| Ok(v))?;

        match cfg.variant {
            Variant::AdA => {
                let gi = self.group_index(&format!("dialect:{dl}:adapter"))?;
                h = self.adapter_residual(run, gi, h)?;
            }
            Variant::AdDa => {
                h = self.dual_adapters(run, &app, &dl, h)?;
            }
            _ => {}
        }

        self.project_tied(run, &head_name, h, emb)
    }

    /// Proposed combined architecture: shared block, routed application
    /// sub-network with a common application adapter in parallel, residual
    /// from the shared block, then dual adapters and the routed head.
    fn forward_ad_caa_da(
        &self,
        run: &mut GraphRun,
        contexts: &ContextBatch,
        key: Option<RoutingKey>,
    ) -> Result<Var> {
        let cfg = self.config();
        let (dl, app) = self.require_key(key)?;
        let l = cfg.layers_per_block;

        let emb = run.param_named(self, "embedding", 0)?;
        let x = run.tape.embed_bag(emb, contexts.clone())?;

        let shared = self.group_index("shared_block")?;
        let h = self.ff_layers(run, shared, l, x, |_, _, _, v| Ok(v))?;

        let subnet = self.group_index(&format!("subnet:{app}"))?;
        let s = self.ff_layers(run, subnet, l, h, |_, _, _, v| Ok(v))?;
        let caa = self.group_index("caa")?;
        let caa_branch = self.adapter_bottleneck(run, caa, h)?;

        // Three-way additive combination: sub-network + CAA + residual.
        let c = run.tape.add(s, caa_branch)?;
        let c = run.tape.add(c, h)?;

        let y = self.dual_adapters(run, &app, &dl, c)?;
        self.project_tied(run, &format!("head:{app}"), y, emb)
    }

    /// Dual adapters atop a sub-network: c + dialect(c) + common(c), both
    /// branches as bottlenecks sharing the single residual.
    fn dual_adapters(&self, run: &mut GraphRun, app: &str, dl: &str, c: Var) -> Result<Var> {
        let dial = self.group_index(&format!("subnet:{app}:dialect:{dl}:adapter"))?;
        let common = self.group_index(&format!("subnet:{app}:adapter:common"))?;
        let dial_branch = self.adapter_bottleneck(run, dial, c)?;
        let common_branch = self.adapter_bottleneck(run, common, c)?;
        let y = run.tape.add(c, dial_branch)?;
        run.tape.add(y, common_branch)
    }

    /// Projection head then logits against the shared embedding (tied
    /// output) plus the head's output bias.
    fn project_tied(&self, run: &mut GraphRun, head: &str, h: Var, emb: Var) -> Result<Var> {
        let gi = self.group_index(head)?;
        let proj_w = run.param(self, gi, 0);
        let proj_b = run.param(self, gi, 1);
        let out_bias = run.param(self, gi, 2);
        let p = run.tape.matmul(h, proj_w)?;
        let p = run.tape.add_row(p, proj_b)?;
        let logits = run.tape.matmul_nt(p, emb)?;
        run.tape.add_row(logits, out_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ArchitectureConfig};
    use crate::fofe::context_bags;

    fn small_cfg(variant: Variant) -> ArchitectureConfig {
        let mut c = ArchitectureConfig::with_defaults(
            variant,
            vec!["us".into(), "gb".into()],
            vec!["assistant".into(), "stt".into()],
            12,
        );
        c.hidden_dim = 8;
        c.num_blocks = 3;
        c.layers_per_block = 2;
        c.adapter_dim = 3;
        c
    }

    fn batch() -> ContextBatch {
        let framed = crate::fofe::frame(&[3, 5, 2]);
        context_bags(&framed, 0.7).into_iter().map(|(b, _)| b).collect()
    }

    #[test]
    fn mixture_weights_are_normalized() {
        let model = build_model(&small_cfg(Variant::Mixture), 2).unwrap();
        let mut run = GraphRun::inference();
        let logits = model.forward(&mut run, &batch(), None).unwrap();
        // Softmax of logits over the vocabulary must be a distribution.
        let probs = run.tape.softmax_rows(logits).unwrap();
        for i in 0..run.tape.value(probs).rows() {
            let s: f64 = run.tape.value(probs).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_n2_reduces_to_single_block() {
        // With one feature block the single softmax weight is exactly 1.
        let mut c = small_cfg(Variant::Mixture);
        c.num_blocks = 2;
        let model = build_model(&c, 3).unwrap();
        let mut run = GraphRun::inference();
        let logits = model.forward(&mut run, &batch(), None).unwrap();

        // Straight-line reference without the mixture machinery.
        let emb = model.group("embedding").unwrap().tensors[0].clone();
        let mut x = Tensor::zeros(batch().len(), 8);
        for (r, bag) in batch().iter().enumerate() {
            for &(tok, coeff) in bag {
                for j in 0..8 {
                    let v = x.get(r, j) + coeff * emb.get(tok, j);
                    x.set(r, j, v);
                }
            }
        }
        let block = model.group("block:0").unwrap();
        let mut h = x;
        for l in 0..2 {
            let z = h.matmul(&block.tensors[2 * l]).unwrap();
            let mut a = Tensor::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    let v = z.get(i, j) + block.tensors[2 * l + 1].get(0, j);
                    a.set(i, j, if v > 0.0 { v } else { 0.0 });
                }
            }
            h = a;
        }
        let headg = model.group("projection").unwrap();
        let p = h.matmul(&headg.tensors[0]).unwrap();
        let mut pb = Tensor::zeros(p.rows(), p.cols());
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                pb.set(i, j, p.get(i, j) + headg.tensors[1].get(0, j));
            }
        }
        let mut expect = pb.matmul_nt(&emb).unwrap();
        for i in 0..expect.rows() {
            for j in 0..expect.cols() {
                let v = expect.get(i, j) + headg.tensors[2].get(0, j);
                expect.set(i, j, v);
            }
        }
        assert!(run.tape.value(logits).bits_eq(&expect));
    }

    #[test]
    fn mixture_a_requires_routing_key() {
        let mut c = small_cfg(Variant::MixtureA);
        c.adapter_placement = Some(AdapterPlacement::BeforeProjection);
        let model = build_model(&c, 2).unwrap();
        let mut run = GraphRun::inference();
        assert!(matches!(
            model.forward(&mut run, &batch(), None),
            Err(Error::Routing(_))
        ));
    }

    #[test]
    fn zero_init_adapters_match_adapter_free_bitwise() {
        for placement in [
            AdapterPlacement::BeforeProjection,
            AdapterPlacement::LastHidden,
            AdapterPlacement::Both,
            AdapterPlacement::EveryHidden,
            AdapterPlacement::EveryHiddenPlusProjection,
        ] {
            let mut c = small_cfg(Variant::MixtureA);
            c.adapter_placement = Some(placement);
            let with = build_model(&c, 11).unwrap();
            let without = build_model(&small_cfg(Variant::Mixture), 11).unwrap();
            let key = with.config().key("gb", "stt").unwrap();

            let mut run_a = GraphRun::inference();
            let la = with.forward(&mut run_a, &batch(), Some(key)).unwrap();
            let mut run_b = GraphRun::inference();
            let lb = without.forward(&mut run_b, &batch(), None).unwrap();
            assert!(
                run_a.tape.value(la).bits_eq(run_b.tape.value(lb)),
                "placement {placement:?} broke identity at init"
            );
        }

        let with = build_model(&small_cfg(Variant::AdA), 11).unwrap();
        let without = build_model(&small_cfg(Variant::Ad), 11).unwrap();
        let key = with.config().key("us", "assistant").unwrap();
        let mut run_a = GraphRun::inference();
        let la = with.forward(&mut run_a, &batch(), Some(key)).unwrap();
        let mut run_b = GraphRun::inference();
        let lb = without.forward(&mut run_b, &batch(), Some(key)).unwrap();
        assert!(run_a.tape.value(la).bits_eq(run_b.tape.value(lb)));
    }

    #[test]
    fn perturbing_inactive_subnet_leaves_output_bit_identical() {
        for variant in [Variant::Ad, Variant::AdA, Variant::AdDa, Variant::AdCaaDa] {
            let model = build_model(&small_cfg(variant), 5).unwrap();
            let key = model.config().key("us", "assistant").unwrap();
            let mut run = GraphRun::inference();
            let logits = model.forward(&mut run, &batch(), Some(key)).unwrap();
            let baseline = run.tape.value(logits).clone();

            let mut perturbed = model.clone();
            for (g, role) in perturbed
                .groups_mut()
                .iter_mut()
                .zip(model.roles().iter())
            {
                if !role.active_for(model.config(), key) {
                    for t in &mut g.tensors {
                        for v in t.data_mut() {
                            *v += 17.5;
                        }
                    }
                }
            }
            let mut run2 = GraphRun::inference();
            let logits2 = perturbed.forward(&mut run2, &batch(), Some(key)).unwrap();
            assert!(
                run2.tape.value(logits2).bits_eq(&baseline),
                "variant {variant:?} leaked inactive parameters"
            );
        }
    }

    #[test]
    fn ad_caa_da_matches_straight_line_oracle() {
        let model = build_model(&small_cfg(Variant::AdCaaDa), 9).unwrap();
        let key = model.config().key("gb", "stt").unwrap();
        let contexts = batch();
        let mut run = GraphRun::inference();
        let logits = model.forward(&mut run, &contexts, Some(key)).unwrap();

        // Re-implementation with raw tensor ops.
        let g = |name: &str| model.group(name).unwrap();
        let emb = &g("embedding").tensors[0];
        let d = model.config().hidden_dim;
        let mut x = Tensor::zeros(contexts.len(), d);
        for (r, bag) in contexts.iter().enumerate() {
            for &(tok, coeff) in bag {
                for j in 0..d {
                    let v = x.get(r, j) + coeff * emb.get(tok, j);
                    x.set(r, j, v);
                }
            }
        }
        let stack = |group: &crate::tensor::ParamGroup, input: &Tensor| {
            let mut h = input.clone();
            for l in 0..model.config().layers_per_block {
                let z = h.matmul(&group.tensors[2 * l]).unwrap();
                let mut a = Tensor::zeros(z.rows(), z.cols());
                for i in 0..z.rows() {
                    for j in 0..z.cols() {
                        let v = z.get(i, j) + group.tensors[2 * l + 1].get(0, j);
                        a.set(i, j, if v > 0.0 { v } else { 0.0 });
                    }
                }
                h = a;
            }
            h
        };
        let bottleneck = |group: &crate::tensor::ParamGroup, input: &Tensor| {
            let z = input.matmul(&group.tensors[0]).unwrap();
            let mut a = Tensor::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    let v = z.get(i, j) + group.tensors[1].get(0, j);
                    a.set(i, j, if v > 0.0 { v } else { 0.0 });
                }
            }
            let u = a.matmul(&group.tensors[2]).unwrap();
            let mut out = Tensor::zeros(u.rows(), u.cols());
            for i in 0..u.rows() {
                for j in 0..u.cols() {
                    out.set(i, j, u.get(i, j) + group.tensors[3].get(0, j));
                }
            }
            out
        };

        let h = stack(g("shared_block"), &x);
        let s = stack(g("subnet:stt"), &h);
        let caa = bottleneck(g("caa"), &h);
        let c = s.add(&caa).unwrap().add(&h).unwrap();
        let dial = bottleneck(g("subnet:stt:dialect:gb:adapter"), &c);
        let common = bottleneck(g("subnet:stt:adapter:common"), &c);
        let y = c.add(&dial).unwrap().add(&common).unwrap();
        let head = g("head:stt");
        let p = y.matmul(&head.tensors[0]).unwrap();
        let mut pb = Tensor::zeros(p.rows(), p.cols());
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                pb.set(i, j, p.get(i, j) + head.tensors[1].get(0, j));
            }
        }
        let base = pb.matmul_nt(emb).unwrap();
        let got = run.tape.value(logits);
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let expect = base.get(i, j) + head.tensors[2].get(0, j);
                assert!((got.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ad_caa_da_residual_path_alive_with_zeroed_subnet() {
        let mut model = build_model(&small_cfg(Variant::AdCaaDa), 4).unwrap();
        let key = model.config().key("us", "stt").unwrap();
        for name in ["subnet:stt"] {
            for t in &mut model.group_mut(name).unwrap().tensors {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        // Adapters are already zero-initialized at build time, so the
        // combination must reduce to the shared-block output.
        let contexts = batch();
        let mut run = GraphRun::inference();
        let logits = model.forward(&mut run, &contexts, Some(key)).unwrap();

        let g = |name: &str| model.group(name).unwrap();
        let emb = &g("embedding").tensors[0];
        let d = model.config().hidden_dim;
        let mut x = Tensor::zeros(contexts.len(), d);
        for (r, bag) in contexts.iter().enumerate() {
            for &(tok, coeff) in bag {
                for j in 0..d {
                    let v = x.get(r, j) + coeff * emb.get(tok, j);
                    x.set(r, j, v);
                }
            }
        }
        let mut h = x;
        let shared = g("shared_block");
        for l in 0..model.config().layers_per_block {
            let z = h.matmul(&shared.tensors[2 * l]).unwrap();
            let mut a = Tensor::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    let v = z.get(i, j) + shared.tensors[2 * l + 1].get(0, j);
                    a.set(i, j, if v > 0.0 { v } else { 0.0 });
                }
            }
            h = a;
        }
        let head = g("head:stt");
        let p = h.matmul(&head.tensors[0]).unwrap();
        let got = run.tape.value(logits);
        for i in 0..p.rows() {
            for j in 0..got.cols() {
                let mut expect = 0.0;
                for t in 0..d {
                    expect += (p.get(i, t) + head.tensors[1].get(0, t)) * emb.get(j, t);
                }
                expect += head.tensors[2].get(0, j);
                assert!((got.get(i, j) - expect).abs() < 1e-9);
            }
        }
    }
}
