//! Condition-indexed mixture families and the teacher/student velocity models.
//!
//! A [`ConditionalFamily`] holds a bank of Gaussian modes and one recipe per
//! token. Resolving a [`Condition`] sums the weights added by its unmasked
//! tokens, multiplies in their weight factors, and translates everything by
//! the shifts of unmasked relation tokens. A teacher with bias `beta` samples
//! from the convex combination `(1 - beta) * conditional + beta * prior`,
//! where the prior is the family's majority distribution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::check_dims;
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::rng::standard_normal;
use crate::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Object,
    Attribute,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: TokenId,
    pub role: TokenRole,
}

impl Token {
    pub fn new(id: TokenId, role: TokenRole) -> Self {
        Self { id, role }
    }
}

/// Ordered tokens with a per-token mask (`true` hides the token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    tokens: Vec<Token>,
    mask: Vec<bool>,
}

impl Condition {
    /// A condition with every token visible.
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        let mask = vec![false; tokens.len()];
        Self::with_mask(tokens, mask)
    }

    pub fn with_mask(tokens: Vec<Token>, mask: Vec<bool>) -> Result<Self> {
        if tokens.len() != mask.len() {
            return Err(Error::DimensionMismatch {
                expected: tokens.len(),
                found: mask.len(),
            });
        }
        for (i, a) in tokens.iter().enumerate() {
            if tokens[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::Config(format!("token {} appears twice", a.id)));
            }
        }
        Ok(Self { tokens, mask })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn unmasked(&self) -> impl Iterator<Item = &Token> {
        self.tokens.iter().zip(&self.mask).filter(|(_, m)| !**m).map(|(t, _)| t)
    }

    /// Copy with every token whose id is listed additionally hidden.
    pub fn masked(&self, ids: &[TokenId]) -> Self {
        let mask = self
            .tokens
            .iter()
            .zip(&self.mask)
            .map(|(t, m)| *m || ids.contains(&t.id))
            .collect();
        Self {
            tokens: self.tokens.clone(),
            mask,
        }
    }
}

/// What one token contributes when it is visible.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecipe {
    pub token: Token,
    /// `(mode index, weight)` added to the conditional weights.
    pub adds: Vec<(usize, f64)>,
    /// `(mode index, factor)` multiplied into the weights after all additions.
    pub scales: Vec<(usize, f64)>,
    /// Translation applied to every resolved mode (relation placement).
    pub shift: Option<Vec<f64>>,
}

impl TokenRecipe {
    pub fn adding(token: Token, adds: Vec<(usize, f64)>) -> Self {
        Self {
            token,
            adds,
            scales: Vec::new(),
            shift: None,
        }
    }
}

/// A resolved conditional: the mixture and, per component, the mode it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub mixture: GaussianMixture,
    pub modes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFamily {
    modes: Vec<GaussianComponent>,
    recipes: Vec<TokenRecipe>,
    prior: GaussianMixture,
}

impl ConditionalFamily {
    pub fn new(modes: Vec<GaussianComponent>, recipes: Vec<TokenRecipe>, prior: GaussianMixture) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config("family needs at least one mode".into()));
        }
        let d = prior.dim();
        for m in &modes {
            if m.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.dim(),
                });
            }
        }
        for (i, r) in recipes.iter().enumerate() {
            if recipes[..i].iter().any(|o| o.token.id == r.token.id) {
                return Err(Error::Config(format!("token {} has two recipes", r.token.id)));
            }
            for &(m, w) in r.adds.iter().chain(&r.scales) {
                if m >= modes.len() {
                    return Err(Error::Config(format!(
                        "token {} references unknown mode {m}",
                        r.token.id
                    )));
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::Config(format!(
                        "token {} has a negative or non-finite weight",
                        r.token.id
                    )));
                }
            }
            if let Some(s) = &r.shift {
                if s.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: s.len(),
                    });
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("relation shift"));
                }
            }
        }
        Ok(Self { modes, recipes, prior })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn modes(&self) -> &[GaussianComponent] {
        &self.modes
    }

    pub fn recipes(&self) -> &[TokenRecipe] {
        &self.recipes
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn recipe(&self, id: TokenId) -> Option<&TokenRecipe> {
        self.recipes.iter().find(|r| r.token.id == id)
    }

    /// The true conditional distribution of `c`, ignoring masked tokens.
    pub fn conditional(&self, c: &Condition) -> Result<Resolved> {
        let mut weights = vec![0.0; self.modes.len()];
        let mut shift = vec![0.0; self.dim()];
        let mut visible = Vec::new();
        for token in c.unmasked() {
            let recipe = self
                .recipe(token.id)
                .ok_or_else(|| Error::Config(format!("token {} is not in the vocabulary", token.id)))?;
            visible.push(recipe);
            for &(m, w) in &recipe.adds {
                weights[m] += w;
            }
            if let Some(s) = &recipe.shift {
                for (a, b) in shift.iter_mut().zip(s) {
                    *a += b;
                }
            }
        }
        for recipe in visible {
            for &(m, f) in &recipe.scales {
                weights[m] *= f;
            }
        }
        let mut components = Vec::new();
        let mut raw = Vec::new();
        let mut modes = Vec::new();
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                let mode = &self.modes[i];
                let mean = mode.mean().iter().zip(&shift).map(|(m, s)| m + s).collect();
                components.push(GaussianComponent::new(mean, mode.var().to_vec())?);
                raw.push(*w);
                modes.push(i);
            }
        }
        if components.is_empty() {
            return Err(Error::Config("condition resolves to an empty mixture".into()));
        }
        Ok(Resolved {
            mixture: GaussianMixture::normalized(components, raw)?,
            modes,
        })
    }

    /// Mixture used to score endpoints of condition `c`: every distinct
    /// component of the conditional and of the prior with equal weight, plus
    /// the indices of the conditional's components (the targets).
    pub fn scoring_reference(&self, c: &Condition) -> Result<(GaussianMixture, Vec<usize>)> {
        let resolved = self.conditional(c)?;
        let mut components: Vec<GaussianComponent> = resolved.mixture.components().to_vec();
        let targets = (0..components.len()).collect();
        for p in self.prior.components() {
            if !components.contains(p) {
                components.push(p.clone());
            }
        }
        let n = components.len();
        let mixture = GaussianMixture::normalized(components, vec![1.0; n])?;
        Ok((mixture, targets))
    }
}

/// Convex combination of two mixtures' weights, merging identical components
/// and dropping components with zero weight.
fn blend(a: &GaussianMixture, b: &GaussianMixture, beta: f64) -> Result<GaussianMixture> {
    let mut components: Vec<GaussianComponent> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let sides = [(a, 1.0 - beta), (b, beta)];
    for (mixture, scale) in sides {
        for (c, w) in mixture.components().iter().zip(mixture.weights()) {
            let w = scale * w;
            if w == 0.0 {
                continue;
            }
            match components.iter().position(|e| e == c) {
                Some(i) => weights[i] += w,
                None => {
                    components.push(c.clone());
                    weights.push(w);
                }
            }
        }
    }
    GaussianMixture::normalized(components, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Teacher,
    Student,
}

/// An evaluable velocity field `v(x, t, c)` derived from a family.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    family: ConditionalFamily,
    bias: f64,
    noise: f64,
    role: ModelRole,
}

impl VelocityModel {
    pub fn new(family: ConditionalFamily, bias: f64, noise: f64, role: ModelRole) -> Result<Self> {
        if !(0.0..=1.0).contains(&bias) {
            return Err(Error::Config(format!("bias strength {bias} is outside [0, 1]")));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::Config(format!("weakness noise {noise} must be finite and >= 0")));
        }
        Ok(Self {
            family,
            bias,
            noise,
            role,
        })
    }

    pub fn teacher(family: ConditionalFamily, bias: f64) -> Result<Self> {
        Self::new(family, bias, 0.0, ModelRole::Teacher)
    }

    pub fn student(family: ConditionalFamily, noise: f64) -> Result<Self> {
        Self::new(family, 0.0, noise, ModelRole::Student)
    }

    pub fn family(&self) -> &ConditionalFamily {
        &self.family
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    /// Distribution this model transports noise to under condition `c`.
    pub fn effective_mixture(&self, c: &Condition) -> Result<GaussianMixture> {
        let truth = self.family.conditional(c)?.mixture;
        if self.bias == 0.0 {
            return Ok(truth);
        }
        if self.bias == 1.0 {
            return Ok(self.family.prior.clone());
        }
        blend(&truth, &self.family.prior, self.bias)
    }

    /// Fix the condition once; the result is cheap to evaluate repeatedly.
    pub fn bind(&self, c: &Condition) -> Result<BoundField> {
        Ok(BoundField {
            mixture: self.effective_mixture(c)?,
            noise: self.noise,
        })
    }

    pub fn evaluate<R: Rng + ?Sized>(&self, x: &[f64], t: f64, c: &Condition, rng: &mut R) -> Result<Vec<f64>> {
        self.bind(c)?.velocity(x, t, rng)
    }
}

/// A model with its condition resolved to a fixed effective mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundField {
    mixture: GaussianMixture,
    noise: f64,
}

impl BoundField {
    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn velocity<R: Rng + ?Sized>(&self, x: &[f64], t: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut v = vec![0.0; x.len()];
        let mut scratch = Vec::with_capacity(self.mixture.len());
        self.velocity_into(x, t, &mut v, None, &mut scratch, rng)?;
        Ok(v)
    }

    /// Marginal velocity of the effective mixture plus `noise * N(0, I)`.
    /// The optional score is the analytic score of the effective mixture and
    /// carries no perturbation. No draws are taken when `noise == 0`.
    pub fn velocity_into<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        t: f64,
        velocity: &mut [f64],
        score: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
        rng: &mut R,
    ) -> Result<()> {
        self.mixture.velocity_into(x, t, velocity, score, scratch)?;
        if self.noise > 0.0 {
            for v in velocity.iter_mut() {
                *v += self.noise * standard_normal(rng);
            }
        }
        Ok(())
    }
}

/// Classifier-free guidance `v_uncond + gamma (v_cond - v_uncond)`.
pub fn cfg_velocity(v_cond: &[f64], v_uncond: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_dims(v_cond, v_uncond)?;
    Ok(v_cond.iter().zip(v_uncond).map(|(c, u)| u + gamma * (c - u)).collect())
}
