use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::abft::RoundoffConvention;
use crate::collectives::Schedule;
use crate::error::{Error, Result};
use crate::inject::{preset, SdcProfile, PRESET_NAMES};
use crate::lockstep::{Experiment, SeverityMode};
use crate::model::{AdamHyper, ModelConfig};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Rq1,
    Rq2,
    #[default]
    Rq3,
    Shadow,
    Abft,
    Gradcheck,
    Calibrate,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Rq1 => "rq1",
            Protocol::Rq2 => "rq2",
            Protocol::Rq3 => "rq3",
            Protocol::Shadow => "shadow",
            Protocol::Abft => "abft",
            Protocol::Gradcheck => "gradcheck",
            Protocol::Calibrate => "calibrate",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub warmup_frac: f64,
    pub min_lr_frac: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        OptimizerConfig {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            max_grad_norm: h.max_grad_norm,
            warmup_frac: 0.02,
            min_lr_frac: 0.1,
        }
    }
}

/// A run configuration file. Unknown keys are rejected; omitted keys take
/// desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub seed: u64,
    /// Optimizer steps `M`.
    pub steps: u64,
    /// `B`; must equal `micro_batch * grad_accum` when given.
    pub global_batch: Option<usize>,
    /// Defaults to the tiny f32 model for gradcheck, desk f32 for abft, desk otherwise.
    pub model: Option<ModelConfig>,
    /// Preset name or inline profile. Defaults to `node10-like` for
    /// calibrate and `healthy` otherwise.
    #[serde(deserialize_with = "profile_field")]
    pub profile: Option<SdcProfile>,
    pub optimizer: OptimizerConfig,
    pub snapshot_steps: Vec<u64>,
    /// Parameter snapshot (`.bin` with sidecar) to start from.
    pub init_snapshot: Option<PathBuf>,
    pub severity_mode: SeverityMode,
    pub u_convention: RoundoffConvention,
    pub schedule: Schedule,
    pub out_dir: Option<PathBuf>,
    pub calibrate_microsteps: u64,
    pub gradcheck_h: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            protocol: Protocol::default(),
            seed: 0,
            steps: 200,
            global_batch: None,
            model: None,
            profile: None,
            optimizer: OptimizerConfig::default(),
            snapshot_steps: Vec::new(),
            init_snapshot: None,
            severity_mode: SeverityMode::default(),
            u_convention: RoundoffConvention::default(),
            schedule: Schedule::default(),
            out_dir: None,
            calibrate_microsteps: 100,
            gradcheck_h: 1e-2,
        }
    }
}

fn profile_field<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<SdcProfile>, D::Error> {
    struct V;
    impl<'de> Visitor<'de> for V {
        type Value = Option<SdcProfile>;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            write!(
                f,
                "a preset name ({}) or a profile object",
                PRESET_NAMES.join(", ")
            )
        }
        fn visit_str<E: de::Error>(self, s: &str) -> std::result::Result<Self::Value, E> {
            preset(s)
                .map(Some)
                .ok_or_else(|| E::custom(format!("unknown preset `{s}`")))
        }
        fn visit_unit<E: de::Error>(self) -> std::result::Result<Self::Value, E> {
            Ok(None)
        }
        fn visit_map<A: MapAccess<'de>>(
            self,
            map: A,
        ) -> std::result::Result<Self::Value, A::Error> {
            SdcProfile::deserialize(de::value::MapAccessDeserializer::new(map)).map(Some)
        }
    }
    d.deserialize_any(V)
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { "<root>".into() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.protocol {
            Protocol::Gradcheck => ModelConfig::tiny(),
            Protocol::Abft => ModelConfig {
                dtype: DType::F32,
                ..ModelConfig::desk()
            },
            _ => ModelConfig::desk(),
        })
    }

    pub fn profile(&self) -> SdcProfile {
        self.profile.clone().unwrap_or_else(|| match self.protocol {
            Protocol::Calibrate => preset("node10-like").expect("shipped preset"),
            _ => SdcProfile::healthy(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model();
        model.validate()?;
        self.profile().validate("profile")?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if let Some(b) = self.global_batch {
            let want = model.micro_batch * model.grad_accum;
            if b != want {
                return Err(Error::config(
                    "global_batch",
                    format!("{b} != micro_batch x grad_accum = {want}"),
                ));
            }
        }
        let o = &self.optimizer;
        let checks = [
            ("optimizer.lr", o.lr > 0.0 && o.lr.is_finite()),
            ("optimizer.beta1", (0.0..1.0).contains(&o.beta1)),
            ("optimizer.beta2", (0.0..1.0).contains(&o.beta2)),
            ("optimizer.eps", o.eps > 0.0),
            ("optimizer.weight_decay", o.weight_decay >= 0.0),
            ("optimizer.max_grad_norm", o.max_grad_norm > 0.0),
            (
                "optimizer.warmup_frac",
                (0.0..=1.0).contains(&o.warmup_frac),
            ),
            (
                "optimizer.min_lr_frac",
                (0.0..=1.0).contains(&o.min_lr_frac),
            ),
            ("calibrate_microsteps", self.calibrate_microsteps > 0),
            (
                "gradcheck_h",
                self.gradcheck_h > 0.0 && self.gradcheck_h.is_finite(),
            ),
        ];
        for (path, ok) in checks {
            if !ok {
                return Err(Error::config(path, "out of range"));
            }
        }
        Ok(())
    }

    /// Protocol inputs. `init_snapshot`, if any, is resolved by the caller.
    pub fn experiment(&self) -> Experiment {
        let o = &self.optimizer;
        let mut exp = Experiment::new(self.model(), self.profile(), self.steps, self.seed);
        exp.optimizer = AdamHyper {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            max_grad_norm: o.max_grad_norm,
        };
        exp.warmup_frac = o.warmup_frac;
        exp.min_lr_frac = o.min_lr_frac;
        exp.severity_mode = self.severity_mode;
        exp.u_convention = self.u_convention;
        exp.schedule = self.schedule;
        exp.snapshot_steps = self.snapshot_steps.clone();
        exp.calibrate_microsteps = self.calibrate_microsteps;
        exp
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    RunConfig::parse_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_path(err: Error) -> String {
        match err {
            Error::Config { path, .. } => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse_str(r#"{"protocol": "rq3", "seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.steps, 200);
        assert_eq!(c.model(), ModelConfig::desk());
        assert_eq!(c.profile(), SdcProfile::healthy());
    }

    #[test]
    fn rate_out_of_range_rejected() {
        let e = RunConfig::parse_str(r#"{"profile": {"sites": ["fwd_attn"], "rate": 1.5}}"#)
            .unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert_eq!(config_path(e), "profile.rate");
    }

    #[test]
    fn divisibility_rejected() {
        let e = RunConfig::parse_str(r#"{"model": {"heads": 5, "kv_heads": 2}}"#).unwrap_err();
        assert_eq!(config_path(e), "model.heads");
    }

    #[test]
    fn unknown_key_reports_path() {
        let e =
            RunConfig::parse_str(r#"{"optimizer": {"lr": 1e-3, "momentum": 0.9}}"#).unwrap_err();
        assert!(config_path(e).starts_with("optimizer"));
        let e = RunConfig::parse_str(r#"{"model": {"layers": "two"}}"#).unwrap_err();
        assert_eq!(config_path(e), "model.layers");
    }

    #[test]
    fn presets_by_name_and_inline() {
        for name in PRESET_NAMES {
            let c = RunConfig::parse_str(&format!(r#"{{"profile": "{name}"}}"#)).unwrap();
            assert_eq!(c.profile(), preset(name).unwrap());
            c.profile().validate("profile").unwrap();
        }
        assert!(RunConfig::parse_str(r#"{"profile": "node99"}"#).is_err());
        let c = RunConfig::parse_str(
            r#"{"profile": {"sites": ["fwd_ffn"], "rate": 0.01,
                "severity": {"fixed_factor": 1.5}, "temporal": "constant", "seed": 3}}"#,
        )
        .unwrap();
        assert_eq!(c.profile().rate, 0.01);
    }

    #[test]
    fn global_batch_must_match() {
        RunConfig::parse_str(r#"{"global_batch": 4}"#).unwrap();
        let e = RunConfig::parse_str(r#"{"global_batch": 16}"#).unwrap_err();
        assert_eq!(config_path(e), "global_batch");
    }

    #[test]
    fn protocol_dependent_defaults() {
        let g = RunConfig {
            protocol: Protocol::Gradcheck,
            ..RunConfig::default()
        };
        assert_eq!(g.model(), ModelConfig::tiny());
        let a = RunConfig {
            protocol: Protocol::Abft,
            ..RunConfig::default()
        };
        assert_eq!(a.model().dtype, DType::F32);
        let c = RunConfig {
            protocol: Protocol::Calibrate,
            ..RunConfig::default()
        };
        assert_eq!(c.profile(), preset("node10-like").unwrap());
    }

    #[test]
    fn serialized_config_round_trips() {
        let c = RunConfig::parse_str(r#"{"profile": "node14-like", "steps": 3}"#).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::parse_str(&text).unwrap(), c);
    }
}
