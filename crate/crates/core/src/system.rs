//! The assembled routed system: frozen base, routing encoder, per-route
//! expert/projector modules and a swappable prototype registry.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::config::TemplateConfig;
use crate::error::{GagError, Result};
use crate::expert::DomainExpert;
use crate::injection::{build_injected_embeddings, injected_decode, project, Projector};
use crate::lm::{DecodingConfig, LmInput, ToyLm};
use crate::numerics::Tensor;
use crate::router::{embed_query, BankRegistry, PrototypeBank, RouteDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Ppr,
    Oracle,
    None,
}

impl FromStr for RoutingMode {
    type Err = GagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppr" => Ok(Self::Ppr),
            "oracle" => Ok(Self::Oracle),
            "none" => Ok(Self::None),
            other => Err(GagError::Config(format!(
                "unknown routing mode {other:?} (expected ppr, oracle or none)"
            ))),
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ppr => "ppr",
            Self::Oracle => "oracle",
            Self::None => "none",
        })
    }
}

/// Expert and projector serving one private route.
#[derive(Debug, Clone)]
pub struct RouteModule {
    pub name: String,
    pub expert: DomainExpert,
    pub projector: Projector<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answered {
    pub route: u32,
    /// Present when the route came from prototype routing.
    pub decision: Option<RouteDecision>,
    pub answer: String,
}

#[derive(Debug)]
pub struct GagSystem {
    base: ToyLm<f32>,
    encoder: ToyLm<f32>,
    modules: BTreeMap<u32, RouteModule>,
    route_names: BTreeMap<u32, String>,
    registry: RwLock<Arc<BankRegistry>>,
    pub templates: TemplateConfig,
    pub answer_decoding: DecodingConfig,
    pub background_decoding: DecodingConfig,
}

impl GagSystem {
    /// Checks that every model is frozen and every projector fits the base.
    pub fn new(
        base: ToyLm<f32>,
        encoder: ToyLm<f32>,
        modules: BTreeMap<u32, RouteModule>,
        route_names: BTreeMap<u32, String>,
        templates: TemplateConfig,
        answer_decoding: DecodingConfig,
        background_decoding: DecodingConfig,
    ) -> Result<Self> {
        if !base.is_frozen() || !encoder.is_frozen() {
            return Err(GagError::Frozen("base and encoder must be frozen".into()));
        }
        for (id, m) in &modules {
            if *id == 0 {
                return Err(GagError::Config("route 0 is the base path and takes no module".into()));
            }
            if !m.expert.is_frozen() {
                return Err(GagError::Frozen(format!("expert {id} must be frozen")));
            }
            if m.projector.d_out() != base.d_model() || m.projector.d_in() != m.expert.d_model() {
                return Err(GagError::Config(format!(
                    "projector {id} maps {}→{}, need {}→{}",
                    m.projector.d_in(),
                    m.projector.d_out(),
                    m.expert.d_model(),
                    base.d_model()
                )));
            }
        }
        let registry = BankRegistry::new(encoder.content_hash());
        Ok(Self {
            base,
            encoder,
            modules,
            route_names,
            registry: RwLock::new(Arc::new(registry)),
            templates,
            answer_decoding,
            background_decoding,
        })
    }

    pub fn base(&self) -> &ToyLm<f32> {
        &self.base
    }

    pub fn encoder(&self) -> &ToyLm<f32> {
        &self.encoder
    }

    pub fn module(&self, route: u32) -> Option<&RouteModule> {
        self.modules.get(&route)
    }

    pub fn modules(&self) -> &BTreeMap<u32, RouteModule> {
        &self.modules
    }

    pub fn route_name(&self, route: u32) -> String {
        self.route_names
            .get(&route)
            .cloned()
            .or_else(|| self.registry().get(route).map(|b| b.route_name.clone()))
            .unwrap_or_else(|| format!("route-{route}"))
    }

    /// Current registry snapshot.
    pub fn registry(&self) -> Arc<BankRegistry> {
        Arc::clone(&self.registry.read().expect("registry lock"))
    }

    pub fn attach_bank(&self, bank: PrototypeBank) -> Result<()> {
        let mut guard = self.registry.write().expect("registry lock");
        let next = guard.attach(bank)?;
        *guard = Arc::new(next);
        Ok(())
    }

    pub fn detach_bank(&self, route: u32) -> Result<()> {
        let mut guard = self.registry.write().expect("registry lock");
        let next = guard.detach(route)?;
        *guard = Arc::new(next);
        Ok(())
    }

    pub fn route(&self, query: &str) -> Result<RouteDecision> {
        let e = embed_query(&self.encoder, query)?;
        self.registry().route(&e)
    }

    /// Plain base decoding without any knowledge line.
    pub fn base_answer(&self, query: &str) -> Result<String> {
        let ids = self.templates.answer.without_slot(query);
        self.base
            .decode(LmInput::Tokens(&ids), &self.answer_decoding)?
            .to_text()
    }

    /// Answer through the module of `route` (route 0 is the base path).
    pub fn answer_via(&self, query: &str, route: u32) -> Result<String> {
        if route == 0 {
            return self.base_answer(query);
        }
        let e = self.injected_embeddings(query, route)?;
        injected_decode(&self.base, &e, &self.answer_decoding)?.to_text()
    }

    /// Input rows the base sees for `query` answered through `route`'s module.
    pub fn injected_embeddings(&self, query: &str, route: u32) -> Result<Tensor<f32>> {
        let m = self
            .modules
            .get(&route)
            .ok_or_else(|| GagError::RoutingIntegrity(format!("route {route} has no attached expert module")))?;
        let k = m.expert.read(query, &self.background_decoding)?;
        let z = project(&m.projector, &k)?;
        build_injected_embeddings(&self.base, &self.templates.answer, query, Some(&z.vector))
    }

    pub fn answer(&self, query: &str, mode: RoutingMode, gold_route: Option<u32>) -> Result<Answered> {
        let (route, decision) = match mode {
            RoutingMode::None => (0, None),
            RoutingMode::Oracle => (
                gold_route.ok_or_else(|| GagError::Config("oracle routing needs a gold route label".into()))?,
                None,
            ),
            RoutingMode::Ppr => {
                let d = self.route(query)?;
                (d.route, Some(d))
            }
        };
        let answer = self.answer_via(query, route)?;
        Ok(Answered {
            route,
            decision,
            answer,
        })
    }
}
