//! Noise-estimate combiners: classifier-free guidance and the
//! entropy-targeted variants that add a positive-minus-negative term built
//! from branches whose targeted layer is replaced by `U` or `I`.

use std::fmt;
use std::str::FromStr;

use crate::adapt::registry::Branch;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_OMEGA: f32 = 9.0;
pub const DEFAULT_LAMBDA: f32 = 1.0;

/// Positive/negative pair of the entropy term, both under the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combo {
    None,
    /// `ε(c, A) − ε(c, I)`
    AMinusI,
    /// `ε(c, U) − ε(c, A)`
    UMinusA,
    /// `ε(c, U) − ε(c, I)`
    UMinusI,
}

impl Combo {
    fn pair(self) -> Option<(Branch, Branch)> {
        match self {
            Self::None => None,
            Self::AMinusI => Some((Branch::CondNative, Branch::CondIdentity)),
            Self::UMinusA => Some((Branch::CondUniform, Branch::CondNative)),
            Self::UMinusI => Some((Branch::CondUniform, Branch::CondIdentity)),
        }
    }
}

impl FromStr for Combo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "AI" | "A-I" | "A_minus_I" => Ok(Self::AMinusI),
            "UA" | "U-A" | "U_minus_A" => Ok(Self::UMinusA),
            "UI" | "U-I" | "U_minus_I" => Ok(Self::UMinusI),
            other => Err(Error::Config(format!("unknown combo `{other}`"))),
        }
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::AMinusI => "AI",
            Self::UMinusA => "UA",
            Self::UMinusI => "UI",
        })
    }
}

/// Writing `u = ε(φ, A)`:
///
/// | strategy | estimate |
/// |---|---|
/// | `Cfg` | `u + ω(ε(c,A) − u)` |
/// | `Eq5` | `u + ω(ε(c,A) − u) + λ(pos − neg)` |
/// | `S1` | `u + ω(ε(c,A) − ε(φ,I))` |
/// | `S2` | `u + ω(ε(c,A) − u) + λ(ε(c,A) − ε(c,I))` |
/// | `S3` | `u + ω(ε(c,U) − u) + λ(ε(c,A) − ε(c,I))` |
/// | `S4` | `u + ω(ε(c,U) − u)` |
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Cfg,
    Eq5,
    S1,
    S2,
    S3,
    S4,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfg" | "none" => Ok(Self::Cfg),
            "eq5" => Ok(Self::Eq5),
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "s3" => Ok(Self::S3),
            "s4" => Ok(Self::S4),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cfg => "cfg",
            Self::Eq5 => "eq5",
            Self::S1 => "s1",
            Self::S2 => "s2",
            Self::S3 => "s3",
            Self::S4 => "s4",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub omega: f32,
    pub lambda: f32,
    pub combo: Combo,
    pub strategy: Strategy,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self::cfg(DEFAULT_OMEGA)
    }
}

impl GuidanceSpec {
    pub fn cfg(omega: f32) -> Self {
        Self {
            omega,
            lambda: DEFAULT_LAMBDA,
            combo: Combo::None,
            strategy: Strategy::Cfg,
        }
    }

    pub fn eq5(omega: f32, lambda: f32, combo: Combo) -> Self {
        Self {
            omega,
            lambda,
            combo,
            strategy: Strategy::Eq5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || !self.lambda.is_finite() {
            return Err(Error::Spec("omega and lambda must be finite".into()));
        }
        match (self.strategy, self.combo) {
            (Strategy::Eq5, Combo::None) => Err(Error::Spec("eq5 needs a combo".into())),
            (Strategy::Cfg, c) if c != Combo::None => {
                Err(Error::Spec(format!("plain cfg takes no combo, got {c}")))
            }
            _ => Ok(()),
        }
    }

    fn lambda_active(&self) -> bool {
        self.lambda != 0.0
    }

    /// Branches the estimate reads, in evaluation order. Terms scaled by a
    /// zero `λ` are dropped along with the branches only they need.
    pub fn required_branches(&self) -> Vec<Branch> {
        use Branch::*;
        let mut need = vec![UncondNative];
        match self.strategy {
            Strategy::Cfg => need.push(CondNative),
            Strategy::Eq5 => {
                need.push(CondNative);
                if let (true, Some((p, n))) = (self.lambda_active(), self.combo.pair()) {
                    need.extend([p, n]);
                }
            }
            Strategy::S1 => need.extend([CondNative, UncondIdentity]),
            Strategy::S2 => {
                need.push(CondNative);
                if self.lambda_active() {
                    need.push(CondIdentity);
                }
            }
            Strategy::S3 => {
                need.push(CondUniform);
                if self.lambda_active() {
                    need.extend([CondNative, CondIdentity]);
                }
            }
            Strategy::S4 => need.push(CondUniform),
        }
        Branch::ORDER
            .into_iter()
            .filter(|b| need.contains(b))
            .collect()
    }

    /// Whether any required branch perturbs the targeted layer.
    pub fn needs_target_layer(&self) -> bool {
        self.required_branches()
            .iter()
            .any(|b| b.targeted_replacement().is_some())
    }

    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Cfg => format!("cfg(w={})", self.omega),
            Strategy::Eq5 => format!("eq5[{}](w={},l={})", self.combo, self.omega, self.lambda),
            s => format!("{s}(w={},l={})", self.omega, self.lambda),
        }
    }
}

/// Noise estimates per branch.
#[derive(Clone, Debug, Default)]
pub struct BranchEstimates {
    slots: [Option<Tensor>; 5],
}

fn slot(b: Branch) -> usize {
    Branch::ORDER
        .iter()
        .position(|&x| x == b)
        .expect("branch in ORDER")
}

impl BranchEstimates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, b: Branch, eps: Tensor) {
        self.slots[slot(b)] = Some(eps);
    }

    pub fn with(mut self, b: Branch, eps: Tensor) -> Self {
        self.insert(b, eps);
        self
    }

    pub fn get(&self, b: Branch) -> Result<&Tensor> {
        self.slots[slot(b)]
            .as_ref()
            .ok_or_else(|| Error::Spec(format!("missing noise estimate for branch {b}")))
    }

    pub fn branches(&self) -> Vec<Branch> {
        Branch::ORDER
            .into_iter()
            .filter(|&b| self.slots[slot(b)].is_some())
            .collect()
    }
}

/// `uncond + ω · (cond − uncond)`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, omega: f32) -> Result<Tensor> {
    uncond.zip_map(cond, |u, c| u + omega * (c - u))
}

fn combine3(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    f: impl Fn(f32, f32, f32) -> f32,
) -> Result<Tensor> {
    let ab = a.zip_map(b, |x, _| x)?;
    let _ = ab.zip_map(c, |x, _| x)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.dims().to_vec(), data)
}

fn add_lambda_term(base: Tensor, pos: &Tensor, neg: &Tensor, lambda: f32) -> Result<Tensor> {
    combine3(&base, pos, neg, |b, p, n| b + lambda * (p - n))
}

/// Combines branch estimates per `spec`. Elementwise evaluation order is
/// fixed: the ω-term first, then the λ-term, each as written in the
/// [`Strategy`] table.
pub fn ie_guidance_combine(est: &BranchEstimates, spec: &GuidanceSpec) -> Result<Tensor> {
    spec.validate()?;
    let (w, l) = (spec.omega, spec.lambda);
    let u = est.get(Branch::UncondNative)?;
    match spec.strategy {
        Strategy::Cfg => cfg_combine(est.get(Branch::CondNative)?, u, w),
        Strategy::Eq5 => {
            let base = cfg_combine(est.get(Branch::CondNative)?, u, w)?;
            match (spec.lambda_active(), spec.combo.pair()) {
                (true, Some((p, n))) => add_lambda_term(base, est.get(p)?, est.get(n)?, l),
                _ => Ok(base),
            }
        }
        Strategy::S1 => combine3(
            u,
            est.get(Branch::CondNative)?,
            est.get(Branch::UncondIdentity)?,
            |u, c, ui| u + w * (c - ui),
        ),
        Strategy::S2 | Strategy::S3 => {
            let lead = if spec.strategy == Strategy::S2 {
                Branch::CondNative
            } else {
                Branch::CondUniform
            };
            let base = cfg_combine(est.get(lead)?, u, w)?;
            if spec.lambda_active() {
                add_lambda_term(
                    base,
                    est.get(Branch::CondNative)?,
                    est.get(Branch::CondIdentity)?,
                    l,
                )
            } else {
                Ok(base)
            }
        }
        Strategy::S4 => cfg_combine(est.get(Branch::CondUniform)?, u, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gaussian, SeededRng};
    use Branch::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn cfg_examples() {
        let (c, u) = (t(&[1.0, 2.0]), t(&[-1.0, 0.5]));
        assert!(cfg_combine(&c, &u, 1.0).unwrap().bit_eq(&c));
        assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
        for w in [0.0, 1.0, 7.5, -2.0] {
            assert!(cfg_combine(&c, &c, w).unwrap().bit_eq(&c));
        }
    }

    #[test]
    fn branch_sets() {
        let s = GuidanceSpec::cfg(9.0);
        assert_eq!(s.required_branches(), vec![UncondNative, CondNative]);
        assert!(!s.needs_target_layer());
        let s = GuidanceSpec::eq5(9.0, 1.0, Combo::UMinusI);
        assert_eq!(
            s.required_branches(),
            vec![UncondNative, CondNative, CondUniform, CondIdentity]
        );
        let s = GuidanceSpec::eq5(9.0, 0.0, Combo::UMinusI);
        assert_eq!(s.required_branches(), vec![UncondNative, CondNative]);
        let s = GuidanceSpec {
            strategy: Strategy::S1,
            ..GuidanceSpec::cfg(9.0)
        };
        assert_eq!(
            s.required_branches(),
            vec![UncondNative, CondNative, UncondIdentity]
        );
        let s = GuidanceSpec {
            strategy: Strategy::S3,
            ..GuidanceSpec::cfg(9.0)
        };
        assert_eq!(
            s.required_branches(),
            vec![UncondNative, CondNative, CondUniform, CondIdentity]
        );
        let s = GuidanceSpec {
            strategy: Strategy::S4,
            ..GuidanceSpec::cfg(9.0)
        };
        assert_eq!(s.required_branches(), vec![UncondNative, CondUniform]);
    }

    #[test]
    fn validation() {
        let s = GuidanceSpec {
            strategy: Strategy::Eq5,
            ..GuidanceSpec::cfg(9.0)
        };
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        let s = GuidanceSpec {
            combo: Combo::AMinusI,
            ..GuidanceSpec::cfg(9.0)
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn missing_branch_is_spec_error() {
        let est = BranchEstimates::new()
            .with(UncondNative, t(&[0.0]))
            .with(CondNative, t(&[1.0]));
        let spec = GuidanceSpec::eq5(9.0, 1.0, Combo::AMinusI);
        assert!(matches!(
            ie_guidance_combine(&est, &spec),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn eq5_with_zero_lambda_is_cfg() {
        let mut rng = SeededRng::new(3);
        let mut est = BranchEstimates::new();
        for b in Branch::ORDER {
            est.insert(b, gaussian(&mut rng, [16]));
        }
        for combo in [Combo::AMinusI, Combo::UMinusA, Combo::UMinusI] {
            let got = ie_guidance_combine(&est, &GuidanceSpec::eq5(9.0, 0.0, combo)).unwrap();
            let want = cfg_combine(
                est.get(CondNative).unwrap(),
                est.get(UncondNative).unwrap(),
                9.0,
            )
            .unwrap();
            assert!(got.bit_eq(&want));
        }
    }

    #[test]
    fn s4_with_equal_uniform_branch_is_cfg() {
        let mut rng = SeededRng::new(4);
        let (c, u) = (gaussian(&mut rng, [8]), gaussian(&mut rng, [8]));
        let est = BranchEstimates::new()
            .with(UncondNative, u.clone())
            .with(CondUniform, c.clone());
        let s4 = GuidanceSpec {
            strategy: Strategy::S4,
            ..GuidanceSpec::cfg(9.0)
        };
        assert!(ie_guidance_combine(&est, &s4)
            .unwrap()
            .bit_eq(&cfg_combine(&c, &u, 9.0).unwrap()));
    }

    #[test]
    fn linear_in_branches() {
        let mut rng = SeededRng::new(5);
        let mut est = BranchEstimates::new();
        let mut scaled = BranchEstimates::new();
        for b in Branch::ORDER {
            let e = gaussian(&mut rng, [32]);
            scaled.insert(b, e.scale(2.0).unwrap());
            est.insert(b, e);
        }
        for strategy in [
            Strategy::Eq5,
            Strategy::S1,
            Strategy::S2,
            Strategy::S3,
            Strategy::S4,
        ] {
            let spec = GuidanceSpec {
                strategy,
                combo: Combo::UMinusI,
                omega: 9.0,
                lambda: 1.0,
            };
            let a = ie_guidance_combine(&est, &spec)
                .unwrap()
                .scale(2.0)
                .unwrap();
            let b = ie_guidance_combine(&scaled, &spec).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-5, "{strategy}");
        }
    }

    #[test]
    fn parsing() {
        assert_eq!("UI".parse::<Combo>().unwrap(), Combo::UMinusI);
        assert_eq!("s3".parse::<Strategy>().unwrap(), Strategy::S3);
        assert!("s9".parse::<Strategy>().is_err());
    }
}
