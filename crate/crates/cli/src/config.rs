//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! [`Config::to_text`] writes every key in a fixed order, and feeding that
//! text back reproduces the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use far_core::data::{BenchmarkConfig, DomainSpec};
use far_core::diagnostics::{ExperimentConfig, VariantId};
use far_core::trainer::Mode;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub variant: VariantId,
    pub data_dir: PathBuf,
    pub ablation_variants: Vec<VariantId>,
    pub ablation_seeds: Vec<u64>,
    /// Images per domain exported as activation maps by `diagnose`.
    pub diagnose_samples: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            variant: VariantId::FAR,
            data_dir: PathBuf::from("data"),
            ablation_variants: VariantId::LADDER.to_vec(),
            ablation_seeds: (0..5).collect(),
            diagnose_samples: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3], CliError> {
    let v: Vec<f32> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| CliError::Config(format!("{key}: expected three comma-separated values")))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Dg => "dg",
        Mode::Uda => "uda",
    }
}

impl Config {
    /// Parses `text`, then applies `overrides` (each `key=value`) on top.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {o:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Config::default();
        // The domain count decides which `domain.N.*` keys exist.
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "data.n_domains") {
            cfg.resize_domains(parse("data.n_domains", v)?)?;
        }
        for (k, v) in &pairs {
            if k != "data.n_domains" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io {
                path: p.to_path_buf(),
                source: e,
            })?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    fn resize_domains(&mut self, n: usize) -> Result<(), CliError> {
        if n < 2 {
            return Err(CliError::Config(format!("data.n_domains must be ≥ 2, got {n}")));
        }
        let domains = &mut self.experiment.benchmark.domains;
        while domains.len() < n {
            domains.push(DomainSpec {
                domain_id: domains.len(),
                style_shift: [0.0; 3],
                style_scale: [1.0; 3],
                rho: 0.0,
                noise_std: 0.5,
            });
        }
        domains.truncate(n);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let e = &mut self.experiment;
        let t = &mut e.train;
        let b: &mut BenchmarkConfig = &mut e.benchmark;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "mode" => {
                t.mode = match value.trim().to_ascii_lowercase().as_str() {
                    "dg" => Mode::Dg,
                    "uda" => Mode::Uda,
                    other => return Err(CliError::Config(format!("mode: expected dg or uda, got {other:?}"))),
                }
            }
            "variant" => self.variant = value.parse()?,
            "target_domain" => e.target_domain = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_per_domain" => t.batch_per_domain = parse(key, value)?,
            "lr_init" => t.lr_init = parse(key, value)?,
            "lr_min" => t.lr_min = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "lambda_align" => t.weights.align = parse(key, value)?,
            "lambda_dre" => t.weights.dre = parse(key, value)?,
            "lambda_cls" => t.weights.cls = parse(key, value)?,
            "lambda_consist" => t.weights.consist = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "net.widths" => e.net.widths = parse_list(key, value)?,
            "net.reduction" => e.net.reduction = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value.trim()),
            "data.seed" => b.seed = parse(key, value)?,
            "data.n_classes" => b.n_classes = parse(key, value)?,
            "data.height" => b.height = parse(key, value)?,
            "data.width" => b.width = parse(key, value)?,
            "data.train_per_domain" => b.train_per_domain = parse(key, value)?,
            "data.test_per_domain" => b.test_per_domain = parse(key, value)?,
            "data.n_domains" => {
                let n = parse(key, value)?;
                self.resize_domains(n)?;
            }
            "ablation.variants" => {
                self.ablation_variants = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.parse().map_err(CliError::from))
                    .collect::<Result<_, _>>()?
            }
            "ablation.seeds" => self.ablation_seeds = parse_list(key, value)?,
            "diagnose.samples" => self.diagnose_samples = parse(key, value)?,
            _ => return self.set_domain(key, value),
        }
        Ok(())
    }

    fn set_domain(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let unknown = || CliError::Config(format!("unknown key {key:?}"));
        let rest = key.strip_prefix("domain.").ok_or_else(unknown)?;
        let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        let n = self.experiment.benchmark.domains.len();
        let d = self
            .experiment
            .benchmark
            .domains
            .get_mut(idx)
            .ok_or_else(|| CliError::Config(format!("{key}: only {n} domains configured (see data.n_domains)")))?;
        match field {
            "shift" => d.style_shift = parse_triple(key, value)?,
            "scale" => d.style_scale = parse_triple(key, value)?,
            "rho" => d.rho = parse(key, value)?,
            "noise_std" => d.noise_std = parse(key, value)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.experiment;
        let t = &e.train;
        let b = &e.benchmark;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), t.seed.to_string()),
            ("mode".into(), mode_name(t.mode).into()),
            ("variant".into(), self.variant.to_string()),
            ("target_domain".into(), e.target_domain.to_string()),
            ("epochs".into(), t.epochs.to_string()),
            ("batch_per_domain".into(), t.batch_per_domain.to_string()),
            ("lr_init".into(), t.lr_init.to_string()),
            ("lr_min".into(), t.lr_min.to_string()),
            ("momentum".into(), t.momentum.to_string()),
            ("lambda_align".into(), t.weights.align.to_string()),
            ("lambda_dre".into(), t.weights.dre.to_string()),
            ("lambda_cls".into(), t.weights.cls.to_string()),
            ("lambda_consist".into(), t.weights.consist.to_string()),
            ("log_every".into(), t.log_every.to_string()),
            ("eval_every".into(), t.eval_every.to_string()),
            ("net.widths".into(), join(&e.net.widths)),
            ("net.reduction".into(), e.net.reduction.to_string()),
            ("data.dir".into(), self.data_dir.display().to_string()),
            ("data.seed".into(), b.seed.to_string()),
            ("data.n_classes".into(), b.n_classes.to_string()),
            ("data.height".into(), b.height.to_string()),
            ("data.width".into(), b.width.to_string()),
            ("data.train_per_domain".into(), b.train_per_domain.to_string()),
            ("data.test_per_domain".into(), b.test_per_domain.to_string()),
            ("data.n_domains".into(), b.domains.len().to_string()),
        ];
        for (i, d) in b.domains.iter().enumerate() {
            out.push((format!("domain.{i}.shift"), join(&d.style_shift)));
            out.push((format!("domain.{i}.scale"), join(&d.style_scale)));
            out.push((format!("domain.{i}.rho"), d.rho.to_string()));
            out.push((format!("domain.{i}.noise_std"), d.noise_std.to_string()));
        }
        out.push(("ablation.variants".into(), join(&self.ablation_variants)));
        out.push(("ablation.seeds".into(), join(&self.ablation_seeds)));
        out.push(("diagnose.samples".into(), self.diagnose_samples.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Copies the benchmark geometry into the network and validates both.
    pub fn resolved(mut self) -> Result<Self, CliError> {
        let e = &mut self.experiment;
        e.net.n_classes = e.benchmark.n_classes;
        e.net.height = e.benchmark.height;
        e.net.width = e.benchmark.width;
        for (i, d) in e.benchmark.domains.iter_mut().enumerate() {
            d.domain_id = i;
            d.validate()?;
        }
        e.net.validate()?;
        e.train.validate()?;
        if e.target_domain >= e.benchmark.domains.len() {
            return Err(CliError::Config(format!(
                "target_domain {} outside {} domains",
                e.target_domain,
                e.benchmark.domains.len()
            )));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let err = Config::from_text("epoch = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(Config::from_text("domain.9.rho = 0.1\n", &[]).is_err());
        assert!(Config::from_text("domain.1.colour = 0.1\n", &[]).is_err());
    }

    #[test]
    fn overrides_win_and_comments_ignored() {
        let cfg = Config::from_text("epochs = 3 # short\n# lr_init = 9\n", &["epochs=7".into()]).unwrap();
        assert_eq!(cfg.experiment.train.epochs, 7);
        assert_eq!(cfg.experiment.train.lr_init, Config::default().experiment.train.lr_init);
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = Config::from_text(
            "data.n_domains = 5\ndomain.4.rho = 0.25\nlr_init = 0.0123456789\nmode = uda\n",
            &[],
        )
        .unwrap();
        let again = Config::from_text(&cfg.to_text(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_text(), again.to_text());
    }
}
