//! Model builders, routing, and parameter audits for every architecture
//! variant: the mixture family (N parallel feedforward blocks, one acting as
//! a normalized weighting head over the others) and the application-dependent
//! family (per-key sub-networks with their own projection heads and output
//! biases, of which only the routed one is active at inference), plus their
//! adapter-bearing extensions.

mod forward;
mod io;

pub use forward::{ContextBatch, GraphRun};
pub use io::{load_model, save_model, CheckpointExtras, LoadedModel};

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, ParamGroup, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Mixture,
    MixtureA,
    Ad,
    AdA,
    AdDa,
    AdCaaDa,
}

impl Variant {
    pub fn is_mixture_family(self) -> bool {
        matches!(self, Variant::Mixture | Variant::MixtureA)
    }

    pub fn is_ad_family(self) -> bool {
        !self.is_mixture_family()
    }

    pub fn has_adapters(self) -> bool {
        !matches!(self, Variant::Mixture | Variant::Ad)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mixture => "MIXTURE",
            Variant::MixtureA => "MIXTURE_A",
            Variant::Ad => "AD",
            Variant::AdA => "AD_A",
            Variant::AdDa => "AD_DA",
            Variant::AdCaaDa => "AD_CAA_DA",
        }
    }
}

/// Where dialect adapters sit inside the mixture architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterPlacement {
    /// A single adapter on the combined features, before the projection layer.
    BeforeProjection,
    /// On top of the last hidden layer of each parallel block.
    LastHidden,
    /// Both of the above.
    Both,
    /// After every hidden layer of every parallel block.
    EveryHidden,
    /// Every hidden layer plus the pre-projection adapter.
    EveryHiddenPlusProjection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub variant: Variant,
    /// Hidden width d.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Parallel block count N (mixture family).
    #[serde(default = "default_num_blocks")]
    pub num_blocks: usize,
    /// Feedforward layers per block / sub-network, L.
    #[serde(default = "default_layers")]
    pub layers_per_block: usize,
    /// Adapter bottleneck width k.
    #[serde(default = "default_adapter_dim")]
    pub adapter_dim: usize,
    pub dialects: Vec<String>,
    pub applications: Vec<String>,
    pub vocab_size: usize,
    #[serde(default)]
    pub adapter_placement: Option<AdapterPlacement>,
    /// Forgetting factor for the context encoding layer.
    #[serde(default = "default_fofe_alpha")]
    pub fofe_alpha: f64,
}

fn default_hidden_dim() -> usize {
    768
}
fn default_num_blocks() -> usize {
    5
}
fn default_layers() -> usize {
    4
}
fn default_adapter_dim() -> usize {
    96
}
fn default_fofe_alpha() -> f64 {
    0.7
}

impl ArchitectureConfig {
    /// Config with the published structural defaults (d=768, N=5, L=4, k=96).
    pub fn with_defaults(
        variant: Variant,
        dialects: Vec<String>,
        applications: Vec<String>,
        vocab_size: usize,
    ) -> Self {
        ArchitectureConfig {
            variant,
            hidden_dim: default_hidden_dim(),
            num_blocks: default_num_blocks(),
            layers_per_block: default_layers(),
            adapter_dim: default_adapter_dim(),
            dialects,
            applications,
            vocab_size,
            adapter_placement: None,
            fofe_alpha: default_fofe_alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn unique(list: &[String], what: &str) -> Result<()> {
            if list.is_empty() {
                return Err(Error::Config(format!("{what} list is empty")));
            }
            let mut seen = std::collections::BTreeSet::new();
            for item in list {
                if item.is_empty() || item.chars().any(char::is_whitespace) {
                    return Err(Error::Config(format!("invalid {what} label {item:?}")));
                }
                if !seen.insert(item) {
                    return Err(Error::Config(format!("duplicate {what} label {item:?}")));
                }
            }
            Ok(())
        }
        unique(&self.dialects, "dialect")?;
        unique(&self.applications, "application")?;
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.layers_per_block == 0 {
            return Err(Error::Config("layers_per_block must be at least 1".into()));
        }
        if self.variant.is_mixture_family() && self.num_blocks < 2 {
            return Err(Error::Config(
                "mixture variants need num_blocks >= 2 (one block is the mixture)".into(),
            ));
        }
        if !(self.adapter_dim > 0 && self.adapter_dim < self.hidden_dim) {
            return Err(Error::Config(format!(
                "adapter_dim must satisfy 0 < k < d, got k={} d={}",
                self.adapter_dim, self.hidden_dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        if !(self.fofe_alpha > 0.0 && self.fofe_alpha < 1.0) {
            return Err(Error::Config(format!(
                "fofe_alpha must lie strictly inside (0,1), got {}",
                self.fofe_alpha
            )));
        }
        match self.variant {
            Variant::Mixture | Variant::Ad | Variant::AdDa | Variant::AdCaaDa => {
                if self.adapter_placement.is_some() {
                    return Err(Error::Config(format!(
                        "adapter_placement configured on variant {} which has no placeable adapters",
                        self.variant.name()
                    )));
                }
            }
            Variant::MixtureA => {}
            Variant::AdA => {
                if let Some(p) = self.adapter_placement {
                    if p != AdapterPlacement::BeforeProjection {
                        return Err(Error::Config(
                            "AD_A supports only the BEFORE_PROJECTION placement".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Placement actually used; defaults to the pre-projection placement for
    /// variants with placeable dialect adapters.
    pub fn effective_placement(&self) -> Option<AdapterPlacement> {
        match self.variant {
            Variant::MixtureA => {
                Some(self.adapter_placement.unwrap_or(AdapterPlacement::BeforeProjection))
            }
            Variant::AdA => Some(AdapterPlacement::BeforeProjection),
            _ => None,
        }
    }

    pub fn key(&self, dialect: &str, application: &str) -> Result<RoutingKey> {
        let d = self
            .dialects
            .iter()
            .position(|x| x == dialect)
            .ok_or_else(|| Error::Routing(format!("unknown dialect {dialect:?}")))?;
        let a = self
            .applications
            .iter()
            .position(|x| x == application)
            .ok_or_else(|| Error::Routing(format!("unknown application {application:?}")))?;
        Ok(RoutingKey {
            dialect: d,
            application: a,
        })
    }

    /// Every valid routing key, dialect-major.
    pub fn all_keys(&self) -> Vec<RoutingKey> {
        let mut out = Vec::new();
        for d in 0..self.dialects.len() {
            for a in 0..self.applications.len() {
                out.push(RoutingKey {
                    dialect: d,
                    application: a,
                });
            }
        }
        out
    }

    /// Stable fingerprint of the structural configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The (dialect, application) pair selecting the active sub-network and
/// adapters. Both components index into the config's label lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingKey {
    pub dialect: usize,
    pub application: usize,
}

/// Classification of a parameter group for routing and audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupRole {
    Shared,
    Dialect(String),
    Application(String),
    DialectApplication(String, String),
}

impl GroupRole {
    /// Whether the group participates in the forward pass for `key`.
    pub fn active_for(&self, cfg: &ArchitectureConfig, key: RoutingKey) -> bool {
        match self {
            GroupRole::Shared => true,
            GroupRole::Dialect(d) => cfg.dialects[key.dialect] == *d,
            GroupRole::Application(a) => cfg.applications[key.application] == *a,
            GroupRole::DialectApplication(d, a) => {
                cfg.dialects[key.dialect] == *d && cfg.applications[key.application] == *a
            }
        }
    }

    pub fn is_adapter_role_for_dialect(&self, dialect: &str) -> bool {
        matches!(self, GroupRole::Dialect(d) if d == dialect)
            || matches!(self, GroupRole::DialectApplication(d, _) if d == dialect)
    }
}

/// Counting mode for parameter audits.
#[derive(Debug, Clone, Copy)]
pub enum CountMode {
    Total,
    /// Shared groups plus the groups selected by the key: the deployable
    /// footprint once the routed sub-network is the only one resident.
    Active(RoutingKey),
}

#[derive(Debug, Clone)]
pub struct GroupAudit {
    pub name: String,
    pub role: GroupRole,
    pub params: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamAudit {
    pub groups: Vec<GroupAudit>,
    pub total: usize,
}

/// Parameter count of one adapter bottleneck: down d×k + k, up k×d + d.
pub fn adapter_param_count(d: usize, k: usize) -> usize {
    2 * d * k + k + d
}

/// A parameterized model: named groups, their roles, and the structural
/// configuration. Forward passes live in [`GraphRun`]-based functions.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: ArchitectureConfig,
    groups: Vec<ParamGroup>,
    roles: Vec<GroupRole>,
    index: BTreeMap<String, usize>,
}

impl ModelGraph {
    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn roles(&self) -> &[GroupRole] {
        &self.roles
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("unknown parameter group {name:?}")))
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        Ok(&self.groups[self.group_index(name)?])
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        let i = self.group_index(name)?;
        Ok(&mut self.groups[i])
    }

    /// Mark every group trainable (the base / joint-pretraining setting).
    pub fn set_all_trainable(&mut self) {
        for g in &mut self.groups {
            g.set_trainable(true);
        }
    }

    /// Freeze everything except the given dialect's adapter groups.
    pub fn freeze_except_dialect_adapters(&mut self, dialect: &str) -> Result<()> {
        if !self.config.dialects.iter().any(|d| d == dialect) {
            return Err(Error::Routing(format!("unknown dialect {dialect:?}")));
        }
        let mut any = false;
        for (g, role) in self.groups.iter_mut().zip(&self.roles) {
            let adapter = g.name.contains("adapter") && role.is_adapter_role_for_dialect(dialect);
            g.set_trainable(adapter);
            any |= adapter;
        }
        if !any {
            return Err(Error::Config(format!(
                "variant {} has no adapter groups for dialect {dialect:?}",
                self.config.variant.name()
            )));
        }
        Ok(())
    }

    pub fn count_params(&self, mode: CountMode) -> ParamAudit {
        let mut groups = Vec::new();
        let mut total = 0;
        for (g, role) in self.groups.iter().zip(&self.roles) {
            let include = match mode {
                CountMode::Total => true,
                CountMode::Active(key) => role.active_for(&self.config, key),
            };
            if include {
                let params = g.param_count();
                total += params;
                groups.push(GroupAudit {
                    name: g.name.clone(),
                    role: role.clone(),
                    params,
                    trainable: g.trainable,
                });
            }
        }
        ParamAudit { groups, total }
    }

    /// Copy tensor values for all groups whose names match `other`'s groups.
    /// Shapes must agree. Groups present only in `self` keep their values.
    pub fn copy_groups_from(&mut self, other: &ModelGraph) -> Result<()> {
        for (og, orole) in other.groups.iter().zip(&other.roles) {
            let idx = self.index.get(&og.name).copied().ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint group {:?} does not exist in the target architecture",
                    og.name
                ))
            })?;
            let _ = orole;
            let tg = &mut self.groups[idx];
            if tg.tensors.len() != og.tensors.len() {
                return Err(Error::Config(format!(
                    "group {:?}: tensor count mismatch",
                    og.name
                )));
            }
            for (t, o) in tg.tensors.iter_mut().zip(&og.tensors) {
                if t.shape() != o.shape() {
                    return Err(Error::Config(format!(
                        "group {:?}: shape mismatch {:?} vs {:?}",
                        og.name,
                        t.shape(),
                        o.shape()
                    )));
                }
                *t = o.clone();
            }
        }
        Ok(())
    }

    /// Byte serialization of the groups selected by `filter`, in group order.
    /// Used by the freezing audits.
    pub fn group_bytes<F: Fn(&ParamGroup, &GroupRole) -> bool>(&self, filter: F) -> Vec<u8> {
        let mut out = Vec::new();
        for (g, r) in self.groups.iter().zip(&self.roles) {
            if filter(g, r) {
                out.extend_from_slice(g.name.as_bytes());
                out.push(0);
                out.extend_from_slice(&g.le_bytes());
            }
        }
        out
    }
}

/// Adapter site labels inside the mixture architecture for a placement.
fn mixture_adapter_sites(placement: AdapterPlacement, n: usize, l: usize) -> Vec<String> {
    let block_names: Vec<String> = (0..n - 1)
        .map(|i| format!("block:{i}"))
        .chain(std::iter::once("mixture".to_string()))
        .collect();
    let mut sites = Vec::new();
    match placement {
        AdapterPlacement::BeforeProjection => sites.push("pre_projection".to_string()),
        AdapterPlacement::LastHidden => {
            for b in &block_names {
                sites.push(format!("{b}:out"));
            }
        }
        AdapterPlacement::Both => {
            for b in &block_names {
                sites.push(format!("{b}:out"));
            }
            sites.push("pre_projection".to_string());
        }
        AdapterPlacement::EveryHidden => {
            for b in &block_names {
                for layer in 0..l {
                    sites.push(format!("{b}:layer:{layer}"));
                }
            }
        }
        AdapterPlacement::EveryHiddenPlusProjection => {
            for b in &block_names {
                for layer in 0..l {
                    sites.push(format!("{b}:layer:{layer}"));
                }
            }
            sites.push("pre_projection".to_string());
        }
    }
    sites
}

struct Builder {
    seed: u64,
    groups: Vec<ParamGroup>,
    roles: Vec<GroupRole>,
}

impl Builder {
    fn push(&mut self, name: String, role: GroupRole, tensors: Vec<Tensor>) {
        self.groups.push(ParamGroup::new(name, tensors));
        self.roles.push(role);
    }

    /// L feedforward layers, each d→d with bias.
    fn ff_stack(&mut self, name: String, role: GroupRole, d: usize, l: usize) {
        let mut rng = seeded_rng(self.seed, &self.groups_label(&name));
        let std = (2.0 / d as f64).sqrt();
        let mut tensors = Vec::with_capacity(2 * l);
        for _ in 0..l {
            tensors.push(Tensor::randn(d, d, std, &mut rng));
            tensors.push(Tensor::zeros(1, d));
        }
        self.push(name, role, tensors);
    }

    /// Mixture stack: L layers plus a linear head to n_out units.
    fn mixture_stack(&mut self, name: String, d: usize, l: usize, n_out: usize) {
        let mut rng = seeded_rng(self.seed, &self.groups_label(&name));
        let std = (2.0 / d as f64).sqrt();
        let mut tensors = Vec::with_capacity(2 * l + 2);
        for _ in 0..l {
            tensors.push(Tensor::randn(d, d, std, &mut rng));
            tensors.push(Tensor::zeros(1, d));
        }
        tensors.push(Tensor::randn(d, n_out, (1.0 / d as f64).sqrt(), &mut rng));
        tensors.push(Tensor::zeros(1, n_out));
        self.push(name, GroupRole::Shared, tensors);
    }

    /// Projection head with output bias: [proj_w, proj_b, out_bias].
    fn head(&mut self, name: String, role: GroupRole, d: usize, v: usize) {
        let mut rng = seeded_rng(self.seed, &self.groups_label(&name));
        let tensors = vec![
            Tensor::randn(d, d, (1.0 / d as f64).sqrt(), &mut rng),
            Tensor::zeros(1, d),
            Tensor::zeros(1, v),
        ];
        self.push(name, role, tensors);
    }

    /// Bottleneck adapter: random down-projection, zero up-projection so the
    /// residual form is exactly the identity at initialization.
    fn adapter(&mut self, name: String, role: GroupRole, d: usize, k: usize) {
        let mut rng = seeded_rng(self.seed, &self.groups_label(&name));
        let tensors = vec![
            Tensor::randn(d, k, 0.02, &mut rng),
            Tensor::zeros(1, k),
            Tensor::zeros(k, d),
            Tensor::zeros(1, d),
        ];
        self.push(name, role, tensors);
    }

    fn groups_label(&self, name: &str) -> String {
        format!("group:{name}")
    }
}

/// Construct a model with the variant's exact topology and deterministic,
/// name-keyed initialization: the same (seed, group name) pair always yields
/// the same tensors regardless of which other groups exist.
pub fn build_model(cfg: &ArchitectureConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let (d, l, k, v) = (
        cfg.hidden_dim,
        cfg.layers_per_block,
        cfg.adapter_dim,
        cfg.vocab_size,
    );
    let mut b = Builder {
        seed,
        groups: Vec::new(),
        roles: Vec::new(),
    };

    // Embedding is shared between the input encoding and the output logits:
    // the single tensor below is the only word-representation storage.
    {
        let mut rng = seeded_rng(seed, "group:embedding");
        b.push(
            "embedding".to_string(),
            GroupRole::Shared,
            vec![Tensor::randn(v, d, 0.1, &mut rng)],
        );
    }

    match cfg.variant {
        Variant::Mixture | Variant::MixtureA => {
            for i in 0..cfg.num_blocks - 1 {
                b.ff_stack(format!("block:{i}"), GroupRole::Shared, d, l);
            }
            b.mixture_stack("mixture".to_string(), d, l, cfg.num_blocks - 1);
            b.head("projection".to_string(), GroupRole::Shared, d, v);
            if cfg.variant == Variant::MixtureA {
                let placement = cfg.effective_placement().expect("mixture_a has placement");
                for dl in &cfg.dialects {
                    for site in mixture_adapter_sites(placement, cfg.num_blocks, l) {
                        b.adapter(
                            format!("dialect:{dl}:adapter:{site}"),
                            GroupRole::Dialect(dl.clone()),
                            d,
                            k,
                        );
                    }
                }
            }
        }
        Variant::Ad | Variant::AdA => {
            for dl in &cfg.dialects {
                for app in &cfg.applications {
                    let role = GroupRole::DialectApplication(dl.clone(), app.clone());
                    b.ff_stack(format!("subnet:{dl}:{app}"), role.clone(), d, l);
                    b.head(format!("head:{dl}:{app}"), role, d, v);
                }
            }
            if cfg.variant == Variant::AdA {
                for dl in &cfg.dialects {
                    b.adapter(
                        format!("dialect:{dl}:adapter"),
                        GroupRole::Dialect(dl.clone()),
                        d,
                        k,
                    );
                }
            }
        }
        Variant::AdDa | Variant::AdCaaDa => {
            if cfg.variant == Variant::AdCaaDa {
                b.ff_stack("shared_block".to_string(), GroupRole::Shared, d, l);
                b.adapter("caa".to_string(), GroupRole::Shared, d, k);
            }
            for app in &cfg.applications {
                let role = GroupRole::Application(app.clone());
                b.ff_stack(format!("subnet:{app}"), role.clone(), d, l);
                b.adapter(format!("subnet:{app}:adapter:common"), role.clone(), d, k);
                for dl in &cfg.dialects {
                    b.adapter(
                        format!("subnet:{app}:dialect:{dl}:adapter"),
                        GroupRole::DialectApplication(dl.clone(), app.clone()),
                        d,
                        k,
                    );
                }
                b.head(format!("head:{app}"), role, d, v);
            }
        }
    }

    let index = b
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.name.clone(), i))
        .collect();
    let mut model = ModelGraph {
        config: cfg.clone(),
        groups: b.groups,
        roles: b.roles,
        index,
    };
    model.set_all_trainable();
    Ok(model)
}

/// Convert an adapter-free base model into its adapter-bearing counterpart,
/// copying every base group and freshly initializing the adapters (seeded,
/// near-identity). MIXTURE → MIXTURE_A and AD → AD_A.
pub fn to_adapter_variant(
    base: &ModelGraph,
    placement: Option<AdapterPlacement>,
    seed: u64,
) -> Result<ModelGraph> {
    let mut cfg = base.config.clone();
    match base.config.variant {
        Variant::Mixture => {
            cfg.variant = Variant::MixtureA;
            cfg.adapter_placement = placement;
        }
        Variant::Ad => {
            cfg.variant = Variant::AdA;
            cfg.adapter_placement = None;
            if let Some(p) = placement {
                if p != AdapterPlacement::BeforeProjection {
                    return Err(Error::Config(
                        "AD_A supports only the BEFORE_PROJECTION placement".into(),
                    ));
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "variant {} cannot take freshly added adapters; adapters are part of its topology",
                other.name()
            )));
        }
    }
    let mut model = build_model(&cfg, seed)?;
    model.copy_groups_from(base)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant) -> ArchitectureConfig {
        let mut c = ArchitectureConfig::with_defaults(
            variant,
            vec!["en_us".into(), "en_gb".into(), "en_in".into()],
            vec!["assistant".into(), "stt".into()],
            50,
        );
        c.hidden_dim = 16;
        c.num_blocks = 5;
        c.layers_per_block = 2;
        c.adapter_dim = 4;
        c
    }

    #[test]
    fn mixture_has_n_parallel_stacks_and_weighting_head() {
        let model = build_model(&cfg(Variant::Mixture), 1).unwrap();
        let blocks: Vec<_> = model
            .groups()
            .iter()
            .filter(|g| g.name.starts_with("block:") || g.name == "mixture")
            .collect();
        assert_eq!(blocks.len(), 5);
        let mixture = model.group("mixture").unwrap();
        // L layer pairs plus the (N-1)-way weighting head.
        let head_w = &mixture.tensors[mixture.tensors.len() - 2];
        assert_eq!(head_w.shape(), (16, 4));
    }

    #[test]
    fn ad_has_six_subnets_and_heads() {
        let model = build_model(&cfg(Variant::Ad), 1).unwrap();
        let subnets = model
            .groups()
            .iter()
            .filter(|g| g.name.starts_with("subnet:"))
            .count();
        let heads = model
            .groups()
            .iter()
            .filter(|g| g.name.starts_with("head:"))
            .count();
        assert_eq!(subnets, 6);
        assert_eq!(heads, 6);
    }

    #[test]
    fn ad_da_has_two_subnets_with_dual_adapters() {
        let model = build_model(&cfg(Variant::AdDa), 1).unwrap();
        let subnets: Vec<_> = model
            .groups()
            .iter()
            .filter(|g| g.name.starts_with("subnet:") && !g.name.contains("adapter"))
            .collect();
        assert_eq!(subnets.len(), 2);
        for app in ["assistant", "stt"] {
            let dialect_adapters = model
                .groups()
                .iter()
                .filter(|g| g.name.starts_with(&format!("subnet:{app}:dialect:")))
                .count();
            assert_eq!(dialect_adapters, 3);
            assert!(model.group(&format!("subnet:{app}:adapter:common")).is_ok());
        }
    }

    #[test]
    fn placement_on_adapterless_variant_is_config_error() {
        let mut c = cfg(Variant::Mixture);
        c.adapter_placement = Some(AdapterPlacement::BeforeProjection);
        assert!(matches!(build_model(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn mixture_needs_two_blocks() {
        let mut c = cfg(Variant::Mixture);
        c.num_blocks = 1;
        assert!(matches!(build_model(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_param_count_closed_form() {
        assert_eq!(adapter_param_count(768, 96), 148_320);
        let mut c = cfg(Variant::AdA);
        c.hidden_dim = 768;
        c.adapter_dim = 96;
        let model = build_model(&c, 1).unwrap();
        let adapter = model.group("dialect:en_us:adapter").unwrap();
        assert_eq!(adapter.param_count(), 148_320);
    }

    #[test]
    fn total_ordering_ad_over_caa_over_da() {
        let ad = build_model(&cfg(Variant::Ad), 1).unwrap();
        let da = build_model(&cfg(Variant::AdDa), 1).unwrap();
        let caa = build_model(&cfg(Variant::AdCaaDa), 1).unwrap();
        let t = |m: &ModelGraph| m.count_params(CountMode::Total).total;
        assert!(t(&ad) > t(&caa));
        assert!(t(&caa) > t(&da));
    }

    #[test]
    fn active_le_total_with_equality_only_for_plain_mixture() {
        for variant in [
            Variant::Mixture,
            Variant::MixtureA,
            Variant::Ad,
            Variant::AdA,
            Variant::AdDa,
            Variant::AdCaaDa,
        ] {
            let model = build_model(&cfg(variant), 3).unwrap();
            let total = model.count_params(CountMode::Total).total;
            for key in model.config().all_keys() {
                let active = model.count_params(CountMode::Active(key)).total;
                assert!(active <= total);
                if variant == Variant::Mixture {
                    assert_eq!(active, total);
                } else {
                    assert!(active < total);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let a = build_model(&cfg(Variant::MixtureA), 7).unwrap();
        let b = build_model(&cfg(Variant::MixtureA), 7).unwrap();
        assert_eq!(a.group_bytes(|_, _| true), b.group_bytes(|_, _| true));
        // The adapter-free counterpart shares every non-adapter group bitwise.
        let plain = build_model(&cfg(Variant::Mixture), 7).unwrap();
        let filter = |g: &ParamGroup, _: &GroupRole| !g.name.contains("adapter");
        assert_eq!(a.group_bytes(filter), plain.group_bytes(filter));
    }

    #[test]
    fn unknown_key_is_routing_error() {
        let c = cfg(Variant::Ad);
        assert!(matches!(c.key("fr_fr", "stt"), Err(Error::Routing(_))));
        assert!(matches!(c.key("en_us", "mail"), Err(Error::Routing(_))));
    }
}
