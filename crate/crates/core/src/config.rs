//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. Every key has a default, so an empty file is valid.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::cfft::CfftConfig;
use crate::error::{Error, Result};
use crate::geometry::{build_element_mesh, ElementMesh, MeshDensity, PatchSpec};
use crate::mbf::ElementModel;
use crate::spectral::{ContourSpec, SpectralGreens, SubstrateSpec};

/// How the extraction permittivity is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsEffMode {
    /// (εr + 1)/2.
    Average,
    Custom(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub substrate: SubstrateSpec,
    pub eps_eff: EpsEffMode,
    pub patch: PatchSpec,
    pub gamma: f64,
    /// Spectral truncation in units of k_d.
    pub beta_max_factor: f64,
    /// Truncation of the self-block integral in units of k_d.
    pub self_beta_max_factor: f64,
    pub taylor_order: usize,
    pub oversampling: f64,
    pub size_cap: usize,
    /// Refine tables by 2× spectral zero-padding.
    pub refine: bool,
    pub secondaries: usize,
    /// Neighbour ring spacing for secondaries, in λ0.
    pub ring_spacing_lambda: f64,
    pub load_ohm: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            substrate: SubstrateSpec::default(),
            eps_eff: EpsEffMode::Average,
            patch: PatchSpec::default(),
            gamma: 1.0 / 130.0,
            beta_max_factor: 5.0,
            self_beta_max_factor: 20.0,
            taylor_order: 3,
            oversampling: 3.0,
            size_cap: crate::cfft::DEFAULT_SIZE_CAP,
            refine: true,
            secondaries: 8,
            ring_spacing_lambda: 0.58,
            load_ohm: 50.0,
        }
    }
}

const KEYS: &[&str] = &[
    "eps_r",
    "h_m",
    "loss_tangent",
    "freq_hz",
    "eps_eff_mode",
    "eps_eff_value",
    "patch_length_m",
    "patch_width_m",
    "feed_length_m",
    "feed_width_m",
    "port_location",
    "mesh_patch_side_cols",
    "mesh_patch_rows",
    "mesh_feed_cols",
    "mesh_feed_rows",
    "gamma",
    "beta_max_factor",
    "self_beta_max_factor",
    "taylor_order",
    "oversampling",
    "size_cap",
    "refine",
    "secondaries",
    "ring_spacing_lambda",
    "load_ohm",
];

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: `{key}` has invalid value `{v}`")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut seen = HashSet::new();
        let mut eps_eff_mode = "average".to_string();
        let mut eps_eff_value = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {line}: unknown key `{k}`")));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {line}: `{k}` given twice")));
            }
            let d = &mut c.patch.mesh_density;
            match k {
                "eps_r" => c.substrate.eps_r = num(line, k, v)?,
                "h_m" => c.substrate.h = num(line, k, v)?,
                "loss_tangent" => c.substrate.loss_tangent = num(line, k, v)?,
                "freq_hz" => c.substrate.frequency = num(line, k, v)?,
                "eps_eff_mode" => eps_eff_mode = v.to_string(),
                "eps_eff_value" => eps_eff_value = Some(num::<f64>(line, k, v)?),
                "patch_length_m" => c.patch.patch_length = num(line, k, v)?,
                "patch_width_m" => c.patch.patch_width = num(line, k, v)?,
                "feed_length_m" => c.patch.feed_length = num(line, k, v)?,
                "feed_width_m" => c.patch.feed_width = num(line, k, v)?,
                "port_location" => c.patch.port_location = num(line, k, v)?,
                "mesh_patch_side_cols" => d.patch_side_cols = num(line, k, v)?,
                "mesh_patch_rows" => d.patch_rows = num(line, k, v)?,
                "mesh_feed_cols" => d.feed_cols = num(line, k, v)?,
                "mesh_feed_rows" => d.feed_rows = num(line, k, v)?,
                "gamma" => c.gamma = num(line, k, v)?,
                "beta_max_factor" => c.beta_max_factor = num(line, k, v)?,
                "self_beta_max_factor" => c.self_beta_max_factor = num(line, k, v)?,
                "taylor_order" => c.taylor_order = num(line, k, v)?,
                "oversampling" => c.oversampling = num(line, k, v)?,
                "size_cap" => c.size_cap = num(line, k, v)?,
                "refine" => c.refine = num(line, k, v)?,
                "secondaries" => c.secondaries = num(line, k, v)?,
                "ring_spacing_lambda" => c.ring_spacing_lambda = num(line, k, v)?,
                "load_ohm" => c.load_ohm = num(line, k, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        c.eps_eff = match (eps_eff_mode.as_str(), eps_eff_value) {
            ("average", None) => EpsEffMode::Average,
            ("average", Some(_)) => return Err(Error::Config("`eps_eff_value` requires `eps_eff_mode = custom`".into())),
            ("custom", Some(v)) => EpsEffMode::Custom(v),
            ("custom", None) => return Err(Error::Config("`eps_eff_mode = custom` requires `eps_eff_value`".into())),
            (m, _) => return Err(Error::Config(format!("`eps_eff_mode` must be average or custom, got `{m}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.substrate.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let EpsEffMode::Custom(v) = self.eps_eff {
            if !(v >= 1.0) {
                return bad(format!("eps_eff_value must be >= 1, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.beta_max_factor > 1.0) || !(self.self_beta_max_factor > 1.0) {
            return bad("spectral truncation factors must exceed 1".into());
        }
        if self.taylor_order > 3 {
            return bad(format!("taylor_order must be 0..=3, got {}", self.taylor_order));
        }
        if !(self.oversampling >= 1.0) {
            return bad(format!("oversampling must be >= 1, got {}", self.oversampling));
        }
        if self.secondaries != 0 && self.secondaries != 8 {
            return bad(format!("secondaries must be 0 or 8, got {}", self.secondaries));
        }
        if !(self.ring_spacing_lambda > 0.0) || !(self.load_ohm >= 0.0) {
            return bad("ring spacing must be positive and the load non-negative".into());
        }
        self.patch.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Text form accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let s = &self.substrate;
        let p = &self.patch;
        let d: MeshDensity = p.mesh_density;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("eps_r", s.eps_r.to_string());
        kv("h_m", s.h.to_string());
        kv("loss_tangent", s.loss_tangent.to_string());
        kv("freq_hz", s.frequency.to_string());
        match self.eps_eff {
            EpsEffMode::Average => kv("eps_eff_mode", "average".into()),
            EpsEffMode::Custom(v) => {
                kv("eps_eff_mode", "custom".into());
                kv("eps_eff_value", v.to_string());
            }
        }
        kv("patch_length_m", p.patch_length.to_string());
        kv("patch_width_m", p.patch_width.to_string());
        kv("feed_length_m", p.feed_length.to_string());
        kv("feed_width_m", p.feed_width.to_string());
        kv("port_location", p.port_location.to_string());
        kv("mesh_patch_side_cols", d.patch_side_cols.to_string());
        kv("mesh_patch_rows", d.patch_rows.to_string());
        kv("mesh_feed_cols", d.feed_cols.to_string());
        kv("mesh_feed_rows", d.feed_rows.to_string());
        kv("gamma", self.gamma.to_string());
        kv("beta_max_factor", self.beta_max_factor.to_string());
        kv("self_beta_max_factor", self.self_beta_max_factor.to_string());
        kv("taylor_order", self.taylor_order.to_string());
        kv("oversampling", self.oversampling.to_string());
        kv("size_cap", self.size_cap.to_string());
        kv("refine", self.refine.to_string());
        kv("secondaries", self.secondaries.to_string());
        kv("ring_spacing_lambda", self.ring_spacing_lambda.to_string());
        kv("load_ohm", self.load_ohm.to_string());
        out
    }

    pub fn greens(&self) -> SpectralGreens {
        let mut g = SpectralGreens::new(self.substrate);
        if let EpsEffMode::Custom(v) = self.eps_eff {
            g.eps_eff = v;
        }
        g
    }

    pub fn contour(&self) -> ContourSpec {
        ContourSpec { gamma: self.gamma, beta_max: self.beta_max_factor * self.substrate.kd() }
    }

    pub fn cfft(&self) -> CfftConfig {
        CfftConfig { order: self.taylor_order, oversampling: self.oversampling, size_cap: self.size_cap, pad: if self.refine { 2 } else { 1 } }
    }

    pub fn mesh(&self) -> Result<Arc<ElementMesh>> {
        Ok(Arc::new(build_element_mesh(&self.patch)?))
    }

    pub fn element_model(&self) -> Result<ElementModel> {
        let mut m = ElementModel::new(self.mesh()?, self.greens(), self.contour());
        m.self_beta_max = self.self_beta_max_factor * self.substrate.kd();
        m.load = self.load_ohm;
        Ok(m)
    }

    pub fn ring_spacing(&self) -> f64 {
        self.ring_spacing_lambda * self.substrate.lambda0()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults_and_text_round_trips() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        let mut c = Config::default();
        c.gamma = 0.01;
        c.eps_eff = EpsEffMode::Custom(1.7);
        c.patch.mesh_density = c.patch.mesh_density.scaled(2);
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let e = Config::parse("gamma = 0.01\n\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("bogus"), "{e}");
        let e = Config::parse("gamma = x").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(Config::parse("gamma = 0.1\ngamma = 0.2").is_err());
        assert!(Config::parse("eps_eff_mode = custom").is_err());
        assert!(Config::parse("taylor_order = 4").is_err());
    }

    #[test]
    fn custom_extraction_reaches_the_kernel() {
        let c = Config::parse("eps_eff_mode = custom # fixed\neps_eff_value = 1.5").unwrap();
        assert_eq!(c.greens().eps_eff, 1.5);
        assert_eq!(c.element_model().unwrap().homog.eps_eff, 1.5);
    }
}
