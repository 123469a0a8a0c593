//! Encoder towers plus router, with checkpoint save/load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Input;
use crate::encoder::{Encoder, EncoderConfig, Tower, ViewMatrix};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::rng::{seeded, substream};
use crate::router::{self, RouteMode, RouterConfig, RoutingOutput};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub router: RouterConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.router.validate(self.encoder.dims)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let mut params = encoder.init_params(&mut substream(seed, "encoder"));
        params.extend(router::init_params(
            config.encoder.dims,
            config.router.d_k,
            &mut substream(seed, "router"),
        ));
        Ok(Model {
            config,
            encoder,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let expected = Model::init(config.clone(), 0)?.params;
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint parameter", t.shape(), got.shape()));
            }
        }
        Ok(Model {
            config,
            encoder,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (cfg, params) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(cfg)
            .map_err(|e| Error::Format(format!("checkpoint config header: {e}")))?;
        Model::from_parts(config, params)
    }

    pub fn encode(&self, id: &str, input: &Input, tower: Tower) -> Result<ViewMatrix> {
        self.encoder
            .encode(&self.params, id, input.as_encoder_input(), tower)
    }

    /// Encodes many inputs in parallel, preserving order.
    pub fn encode_all(&self, items: &[(String, Input)], tower: Tower) -> Result<Vec<ViewMatrix>> {
        let borrowed: Vec<_> = items
            .iter()
            .map(|(id, i)| (id.clone(), i.as_encoder_input()))
            .collect();
        self.encoder.encode_many(&self.params, &borrowed, tower)
    }

    /// Deterministic routing at the final temperature of training.
    pub fn route(&self, q: &ViewMatrix) -> Result<RoutingOutput> {
        let r = &self.config.router;
        router::route(
            q,
            &self.params,
            r.tau_at(1.0),
            r.epsilon,
            None,
            &mut seeded(0),
            RouteMode::Eval,
        )
    }
}
