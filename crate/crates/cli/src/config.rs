//! Run configuration: INI file sections of `key = value`, then flag overrides.

use std::fmt::Write as _;
use std::path::Path;

use ini::Ini;
use serde::Serialize;
use switchdit::loss::{PriorAggregation, PriorScaling};
use switchdit::smoe::IntegrationMode;
use switchdit::trainer::data::DatasetKind;
use switchdit::trainer::eval::EvalConfig;
use switchdit::trainer::sample::SampleConfig;
use switchdit::trainer::TrainConfig;
use switchdit::Ablations;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

trait Value {
    fn show(&self) -> String;
    fn read(&mut self, s: &str) -> Result<(), String>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(&mut self, s: &str) -> Result<(), String> {
                *self = s.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            }
        }
    )*};
}

plain_value!(usize, u64, f64, DatasetKind, IntegrationMode);

impl Value for bool {
    fn show(&self) -> String {
        self.to_string()
    }
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = match s {
            "true" | "yes" | "on" | "1" => true,
            "false" | "no" | "off" | "0" => false,
            _ => return Err(format!("expected true or false, got '{s}'")),
        };
        Ok(())
    }
}

impl Value for PriorScaling {
    fn show(&self) -> String {
        match self {
            PriorScaling::Renormalize => "renormalize",
            PriorScaling::KnScale => "kn",
        }
        .into()
    }
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = match s {
            "renormalize" => PriorScaling::Renormalize,
            "kn" => PriorScaling::KnScale,
            _ => return Err(format!("expected renormalize or kn, got '{s}'")),
        };
        Ok(())
    }
}

impl Value for PriorAggregation {
    fn show(&self) -> String {
        match self {
            PriorAggregation::UniqueT => "unique-t",
            PriorAggregation::PerSample => "per-sample",
        }
        .into()
    }
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = match s {
            "unique-t" => PriorAggregation::UniqueT,
            "per-sample" => PriorAggregation::PerSample,
            _ => return Err(format!("expected unique-t or per-sample, got '{s}'")),
        };
        Ok(())
    }
}

impl Value for Option<usize> {
    fn show(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = if s == "none" { None } else { Some(s.parse().map_err(|e| format!("{e}"))?) };
        Ok(())
    }
}

impl Value for Ablations {
    fn show(&self) -> String {
        let n = self.names();
        if n.is_empty() {
            "none".into()
        } else {
            n.join(",")
        }
    }
    fn read(&mut self, s: &str) -> Result<(), String> {
        *self = Ablations::parse(s)?;
        Ok(())
    }
}

macro_rules! keys {
    ($($sec:literal . $key:literal => $($field:ident).+ : $help:literal;)*) => {
        /// `(section, key, description)` of every accepted config key.
        pub const KEYS: &[(&str, &str, &str)] = &[$(($sec, $key, $help)),*];

        fn get(c: &RunConfig, sec: &str, key: &str) -> Option<String> {
            match (sec, key) {
                $(($sec, $key) => Some(c.$($field).+.show()),)*
                _ => None,
            }
        }

        fn set(c: &mut RunConfig, sec: &str, key: &str, v: &str) -> Option<Result<(), String>> {
            match (sec, key) {
                $(($sec, $key) => Some(c.$($field).+.read(v)),)*
                _ => None,
            }
        }
    };
}

keys! {
    "data"."dataset" => train.dataset: "blobs, rings or shapes3 (class-conditional)";
    "data"."size" => train.data_size: "training images generated";
    "data"."seed" => train.data_seed: "dataset generator seed";
    "train"."steps" => train.steps: "optimisation steps";
    "train"."batch_size" => train.batch_size: "images per step";
    "train"."lr" => train.adam.lr: "AdamW learning rate";
    "train"."beta1" => train.adam.beta1: "AdamW first-moment decay";
    "train"."beta2" => train.adam.beta2: "AdamW second-moment decay";
    "train"."adam_eps" => train.adam.eps: "AdamW epsilon";
    "train"."weight_decay" => train.adam.weight_decay: "decoupled weight decay";
    "train"."lambda_dp" => train.lambda_dp: "weight of the diffusion prior loss";
    "train"."lambda_load" => train.lambda_load: "weight of the load-balancing loss (load-balance ablation only)";
    "train"."ema_decay" => train.ema_decay: "EMA decay of the shadow parameters";
    "train"."ablations" => train.ablations: "comma list of noisy-gating, load-balance, random-allocation, or none";
    "train"."match_every" => train.match_every: "recompute the gate/prior matching every this many steps";
    "train"."prior_alpha" => train.prior_alpha: "exponent of the channel-shift prior";
    "train"."prior_scaling" => train.prior_scaling: "prior target scaling: renormalize or kn";
    "train"."prior_aggregation" => train.prior_aggregation: "prior loss average: unique-t or per-sample";
    "train"."allocation_seed" => train.allocation_seed: "seed of the random-allocation prior";
    "train"."cosine_offset" => train.cosine_offset: "offset s of the cosine noise schedule";
    "train"."class_dropout" => train.class_dropout: "probability of dropping a label to the null class";
    "train"."hflip" => train.hflip: "random horizontal flips";
    "train"."stability_window" => train.stability_window: "unchanged steps that count as a settled routing map";
    "train"."seed" => train.seed: "training seed (init, batches, gate noise)";
    "model"."blocks" => train.model.blocks: "transformer blocks N";
    "model"."dim" => train.model.dim: "hidden width (multiple of 4 and of heads)";
    "model"."heads" => train.model.heads: "attention heads";
    "model"."experts" => train.model.experts: "experts per block M";
    "model"."top_k" => train.model.top_k: "experts selected per block k";
    "model"."timesteps" => train.model.steps: "diffusion steps T";
    "model"."patch" => train.model.patch: "patch size (divides 16)";
    "model"."mlp_ratio" => train.model.mlp_ratio: "MLP hidden width / dim";
    "model"."mode" => train.model.mode: "SMoE integration: direct, mask, mask-skip or mask-skip-init";
    "model"."renorm_gates" => train.model.renorm_gates: "renormalise the k selected gate values to sum to one";
    "model"."smoe" => train.model.use_smoe: "false trains the plain DiT baseline";
    "sample"."count" => sample.count: "images to draw";
    "sample"."steps" => sample.steps: "reverse steps (at most T)";
    "sample"."guidance" => sample.guidance: "classifier-free guidance scale (1 disables)";
    "sample"."label" => sample.label: "class to sample, or none";
    "sample"."seed" => sample.seed: "sampling seed";
    "sample"."chunk" => sample.chunk: "images per forward pass";
    "sample"."clip_x0" => sample.clip_x0: "clamp the predicted clean image to [-1, 1] at each reverse step";
    "eval"."n" => eval.n: "generated and held-out images compared";
    "eval"."trials" => eval.trials: "random splits for the null threshold";
    "eval"."quantile" => eval.quantile: "quantile of the null distribution used as threshold";
    "eval"."seed" => eval.seed: "seed of the null-threshold splits";
}

impl RunConfig {
    pub fn get(&self, section: &str, key: &str) -> Option<String> {
        get(self, section, key)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match set(self, section, key, value.trim()) {
            Some(r) => r.map_err(|e| format!("[{section}] {key}: {e}")),
            None => Err(format!("unknown config key '{key}' in section [{section}]")),
        }
    }

    /// Apply every key of an INI document; unknown sections or keys are errors.
    pub fn apply_ini(&mut self, text: &str) -> Result<(), String> {
        let ini = Ini::load_from_str(text).map_err(|e| format!("malformed config: {e}"))?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(format!("config key '{key}' must be inside a [section]"));
                };
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_ini(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }

    /// Resolved configuration as INI text; reloading it reproduces `self`.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (sec, key, _) in KEYS {
            if *sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(s, "{key} = {}", self.get(sec, key).expect("listed key"));
        }
        s
    }

    /// Single-line JSON echo for artifact headers.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from(
        "Configuration file (INI): sections [data] [train] [model] [sample] [eval].\n\
         Precedence: built-in defaults < --config file < command-line flags.\n\
         Unknown sections or keys are rejected.\n",
    );
    let mut section = "";
    for (sec, key, help) in KEYS {
        if *sec != section {
            let _ = writeln!(s, "\n[{sec}]");
            section = sec;
        }
        let _ = writeln!(s, "  {key:<17} {help} [default: {}]", d.get(sec, key).expect("listed key"));
    }
    s
}
