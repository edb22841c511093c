//! Declarative quantization specs.
//!
//! Grammar (items separated by `;`):
//!
//! ```text
//! item    := [glob "="] scheme | "@act=" scheme | "@mode=" ("simulated" | "integer")
//! scheme  := "float" | "sym:" bits | "affine:" bits
//!          | "pot:e" int ".." int ["," "eps=" float] ["," "ztr=" float]
//! ```
//!
//! Globs match site names such as `layer0.attn_qkv`, `tok_emb` or `lm_head`;
//! when several rules match a site, the last one wins. A bare scheme applies
//! to every site (`*`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{PoTConfig, QScheme};

/// How quantized linears execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExecMode {
    /// Dequantize weights (and activations) and run float kernels.
    #[default]
    Simulated,
    /// Run PoT linears through the shift-accumulate integer kernel.
    Integer,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::Simulated => "simulated",
            ExecMode::Integer => "integer",
        })
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(ExecMode::Simulated),
            "integer" => Ok(ExecMode::Integer),
            _ => Err(Error::SpecParse {
                input: s.into(),
                reason: "mode must be `simulated` or `integer`".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRule {
    pub pattern: String,
    /// `None` keeps matching sites in float.
    pub scheme: Option<QScheme>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantSpec {
    pub rules: Vec<QuantRule>,
    pub activations: Option<QScheme>,
    pub mode: ExecMode,
}

/// Default activation scheme for the integer path.
pub const DEFAULT_INTEGER_ACTIVATIONS: QScheme = QScheme::Affine { bits: 16 };

impl QuantSpec {
    pub fn float() -> Self {
        Self::default()
    }

    /// One scheme for every weight and table.
    pub fn uniform(scheme: QScheme) -> Self {
        Self {
            rules: vec![QuantRule {
                pattern: "*".into(),
                scheme: Some(scheme),
            }],
            ..Self::default()
        }
    }

    pub fn with_activations(mut self, scheme: QScheme) -> Self {
        self.activations = Some(scheme);
        self
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    /// Scheme for a weight or table site, last matching rule first.
    pub fn resolve(&self, site: &str) -> Result<Option<QScheme>> {
        for rule in self.rules.iter().rev() {
            let pat = glob::Pattern::new(&rule.pattern).map_err(|e| Error::SpecParse {
                input: rule.pattern.clone(),
                reason: e.to_string(),
            })?;
            if pat.matches(site) {
                return Ok(rule.scheme);
            }
        }
        Ok(None)
    }

    /// Activation scheme after applying the integer-mode default.
    pub fn effective_activations(&self) -> Option<QScheme> {
        match (self.activations, self.mode) {
            (None, ExecMode::Integer) => Some(DEFAULT_INTEGER_ACTIVATIONS),
            (act, _) => act,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for rule in &self.rules {
            glob::Pattern::new(&rule.pattern).map_err(|e| Error::SpecParse {
                input: rule.pattern.clone(),
                reason: e.to_string(),
            })?;
            if let Some(s) = &rule.scheme {
                s.validate()?;
            }
        }
        if let Some(act) = self.effective_activations() {
            act.validate()?;
            if self.mode == ExecMode::Integer
                && !matches!(act, QScheme::Affine { bits } if bits <= 16)
            {
                return Err(Error::InvalidConfig(format!(
                    "integer mode needs affine activations of at most 16 bits, got {act}"
                )));
            }
        }
        Ok(())
    }
}

fn parse_err(input: &str, reason: impl Into<String>) -> Error {
    Error::SpecParse {
        input: input.into(),
        reason: reason.into(),
    }
}

/// Parses one scheme; `float` yields `None`.
pub fn parse_scheme(s: &str) -> Result<Option<QScheme>> {
    let s = s.trim();
    if s == "float" {
        return Ok(None);
    }
    let (kind, rest) = s.split_once(':').ok_or_else(|| {
        parse_err(
            s,
            "expected float, sym:<bits>, affine:<bits> or pot:e<min>..<max>",
        )
    })?;
    let bits = |r: &str| -> Result<u32> {
        r.parse()
            .map_err(|_| parse_err(s, format!("bad bit width {r:?}")))
    };
    let scheme = match kind {
        "sym" => QScheme::Symmetric { bits: bits(rest)? },
        "affine" => QScheme::Affine { bits: bits(rest)? },
        "pot" => {
            let mut parts = rest.split(',');
            let range = parts.next().unwrap_or_default();
            let range = range
                .strip_prefix('e')
                .ok_or_else(|| parse_err(s, "PoT range must look like e<min>..<max>"))?;
            let (lo, hi) = range
                .split_once("..")
                .ok_or_else(|| parse_err(s, "PoT range must look like e<min>..<max>"))?;
            let exp = |v: &str| -> Result<i32> {
                v.parse()
                    .map_err(|_| parse_err(s, format!("bad exponent {v:?}")))
            };
            let mut cfg = PoTConfig {
                e_min: exp(lo)?,
                e_max: exp(hi)?,
                zero_threshold_ratio: PoTConfig::DEFAULT_ZERO_THRESHOLD_RATIO,
                epsilon: PoTConfig::DEFAULT_EPSILON,
            };
            for opt in parts {
                let (key, val) = opt
                    .split_once('=')
                    .ok_or_else(|| parse_err(s, format!("option {opt:?} lacks `=`")))?;
                let val: f64 = val
                    .parse()
                    .map_err(|_| parse_err(s, format!("bad number {val:?}")))?;
                match key {
                    "eps" => cfg.epsilon = val,
                    "ztr" => cfg.zero_threshold_ratio = val,
                    _ => return Err(parse_err(s, format!("unknown PoT option {key:?}"))),
                }
            }
            QScheme::PoT(cfg)
        }
        _ => return Err(parse_err(s, format!("unknown scheme {kind:?}"))),
    };
    scheme.validate()?;
    Ok(Some(scheme))
}

impl FromStr for QuantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = QuantSpec::default();
        for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
            if let Some(opt) = item.strip_prefix('@') {
                let (key, val) = opt
                    .split_once('=')
                    .ok_or_else(|| parse_err(item, "option lacks `=`"))?;
                match key {
                    "act" => spec.activations = parse_scheme(val)?,
                    "mode" => spec.mode = val.parse()?,
                    _ => return Err(parse_err(item, format!("unknown option {key:?}"))),
                }
                continue;
            }
            let (pattern, scheme) = match item.split_once('=') {
                // `pot:e0..4,eps=1e-8` contains `=` after the scheme kind
                Some((p, sch)) if !p.contains(':') => (p.trim().to_string(), sch),
                _ => ("*".to_string(), item),
            };
            spec.rules.push(QuantRule {
                pattern,
                scheme: parse_scheme(scheme)?,
            });
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn write_scheme(f: &mut fmt::Formatter<'_>, s: &Option<QScheme>) -> fmt::Result {
    match s {
        Some(s) => write!(f, "{s}"),
        None => f.write_str("float"),
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut sep = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
            if !std::mem::take(&mut first) {
                f.write_str(";")?;
            }
            Ok(())
        };
        for rule in &self.rules {
            sep(f)?;
            if rule.pattern != "*" {
                write!(f, "{}=", rule.pattern)?;
            }
            write_scheme(f, &rule.scheme)?;
        }
        if let Some(act) = &self.activations {
            sep(f)?;
            write!(f, "@act={act}")?;
        }
        if self.mode != ExecMode::Simulated {
            sep(f)?;
            write!(f, "@mode={}", self.mode)?;
        }
        if first {
            f.write_str("float")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_forms() {
        assert_eq!(
            "float"
                .parse::<QuantSpec>()
                .unwrap()
                .resolve("tok_emb")
                .unwrap(),
            None
        );
        let s: QuantSpec = "sym:8".parse().unwrap();
        assert_eq!(
            s.resolve("layer3.mlp_up").unwrap(),
            Some(QScheme::Symmetric { bits: 8 })
        );
        let s: QuantSpec = "pot:e0..4".parse().unwrap();
        assert_eq!(
            s.resolve("lm_head").unwrap(),
            Some(QScheme::PoT(PoTConfig::new(0, 4).unwrap()))
        );
        let s: QuantSpec = "pot:e-3..2,eps=1e-8,ztr=0.25".parse().unwrap();
        let Some(QScheme::PoT(cfg)) = s.resolve("x").unwrap() else {
            panic!()
        };
        assert_eq!(
            (cfg.e_min, cfg.e_max, cfg.epsilon, cfg.zero_threshold_ratio),
            (-3, 2, 1e-8, 0.25)
        );
    }

    #[test]
    fn scoped_rules_last_wins() {
        let s: QuantSpec = "pot:e0..6;lm_head=float;layer*.mlp_*=sym:8"
            .parse()
            .unwrap();
        assert_eq!(s.resolve("lm_head").unwrap(), None);
        assert_eq!(
            s.resolve("layer1.mlp_down").unwrap(),
            Some(QScheme::Symmetric { bits: 8 })
        );
        assert!(matches!(
            s.resolve("layer1.attn_qkv").unwrap(),
            Some(QScheme::PoT(_))
        ));
    }

    #[test]
    fn options() {
        let s: QuantSpec = "pot:e0..6;@mode=integer".parse().unwrap();
        assert_eq!(s.mode, ExecMode::Integer);
        assert_eq!(
            s.effective_activations(),
            Some(QScheme::Affine { bits: 16 })
        );
        let s: QuantSpec = "sym:8;@act=affine:8".parse().unwrap();
        assert_eq!(s.activations, Some(QScheme::Affine { bits: 8 }));
    }

    #[test]
    fn rejects_garbage() {
        for bad in [
            "int8",
            "sym:1",
            "sym:x",
            "pot:0..4",
            "pot:e4..0",
            "pot:e0..4,foo=1",
            "@mode=fast",
            "sym:8;@act=affine:32;@mode=integer",
        ] {
            assert!(bad.parse::<QuantSpec>().is_err(), "{bad} parsed");
        }
    }

    fn arb_scheme() -> impl Strategy<Value = Option<QScheme>> {
        prop_oneof![
            Just(None),
            (2u32..=32).prop_map(|bits| Some(QScheme::Symmetric { bits })),
            (2u32..=32).prop_map(|bits| Some(QScheme::Affine { bits })),
            (-20i32..10, 0i32..20, 1e-15f64..1.0, 0.01f64..=1.0).prop_map(
                |(lo, span, eps, ztr)| {
                    Some(QScheme::PoT(PoTConfig {
                        e_min: lo,
                        e_max: lo + span,
                        zero_threshold_ratio: ztr,
                        epsilon: eps,
                    }))
                }
            ),
        ]
    }

    proptest! {
        #[test]
        fn display_roundtrip(
            rules in prop::collection::vec(("(\\*|lm_head|layer[0-9]\\.\\*|tok_emb)", arb_scheme()), 0..4),
            act in prop_oneof![Just(None), (2u32..=16).prop_map(|b| Some(QScheme::Affine { bits: b }))],
            integer in any::<bool>(),
        ) {
            let spec = QuantSpec {
                rules: rules.into_iter().map(|(pattern, scheme)| QuantRule { pattern, scheme }).collect(),
                activations: act,
                mode: if integer { ExecMode::Integer } else { ExecMode::Simulated },
            };
            let text = spec.to_string();
            let back: QuantSpec = text.parse().unwrap();
            // an empty spec prints as `float`, which parses to one float rule
            if spec.rules.is_empty() && spec.activations.is_none() && !integer {
                prop_assert_eq!(back.resolve("tok_emb").unwrap(), None);
            } else {
                prop_assert_eq!(back, spec);
            }
        }
    }
}
