//! Online estimation of transition probabilities with discounted Dirichlet
//! pseudo-counts over a known successor structure.

use std::io::{Read, Write};
use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::abstraction::TransitionModel;
use crate::error::{Error, Result};
use crate::mdp::{ActionId, StateVector};

/// The known finite-support structure of the environment.
///
/// `candidates` must be non-empty, duplicate-free and deterministic for fixed
/// inputs, and must contain every successor the environment can produce.
pub trait SuccessorTemplate: Send + Sync {
    /// Size of the controller command alphabet.
    fn command_count(&self) -> usize;

    /// Size of the action alphabet.
    fn action_count(&self) -> usize;

    /// Actions enabled in `s`.
    fn actions(&self, s: &StateVector) -> Vec<ActionId>;

    /// Ordered candidate successors of `(s, a)`.
    fn candidates(&self, s: &StateVector, a: ActionId) -> Vec<StateVector>;

    /// Position of `succ` among the candidates of `(s, a)`.
    fn candidate_index(&self, s: &StateVector, a: ActionId, succ: &StateVector) -> Option<usize> {
        self.candidates(s, a).iter().position(|c| c == succ)
    }

    /// Number of candidates of `(s, a)`.
    fn candidate_count(&self, s: &StateVector, a: ActionId) -> usize {
        self.candidates(s, a).len()
    }

    /// A looser template whose per-step delta bound is one larger, if the
    /// template supports widening.
    fn widened(&self) -> Option<Arc<dyn SuccessorTemplate>> {
        None
    }
}

/// Initial transition probabilities for keys that were never observed.
pub trait PriorModel: Send + Sync {
    /// Probabilities aligned with `template.candidates(s, a)`.
    fn prior(&self, template: &dyn SuccessorTemplate, s: &StateVector, a: ActionId) -> Result<Vec<f64>>;
}

/// Uses a transition model as prior; every successor it produces must be a
/// template candidate.
#[derive(Clone, Debug)]
pub struct ModelPrior<M>(pub M);

impl<M: TransitionModel + Send + Sync> PriorModel for ModelPrior<M> {
    fn prior(&self, template: &dyn SuccessorTemplate, s: &StateVector, a: ActionId) -> Result<Vec<f64>> {
        let mut p = vec![0.0; template.candidate_count(s, a)];
        for (succ, q) in self.0.successors(s, a)? {
            let j = template
                .candidate_index(s, a, &succ)
                .ok_or_else(|| Error::SuccessorNotInTemplate {
                    state: s.clone(),
                    action: a,
                    successor: succ.clone(),
                })?;
            p[j] += q;
        }
        Ok(p)
    }
}

/// Share of an informative prior's mass spread uniformly, keeping every
/// hyperparameter positive.
pub const PRIOR_SMOOTHING: f64 = 0.05;

/// Learning-rate schedule; the step is the number of observations already
/// made for a key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSchedule {
    Constant(f64),
    /// `1 - (1 - base) / (1 + step / horizon)`
    Harmonic {
        base: f64,
        horizon: f64,
    },
}

impl LambdaSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        match *self {
            LambdaSchedule::Constant(l) => l,
            LambdaSchedule::Harmonic { base, horizon } => lambda_schedule(step, base, horizon),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LambdaSchedule::Constant(l) => l > 0.0 && l <= 1.0,
            LambdaSchedule::Harmonic { base, horizon } => base > 0.0 && base <= 1.0 && horizon > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("learning rate schedule {self:?}")))
        }
    }
}

/// Harmonic learning-rate schedule: starts at `base`, approaches 1.
pub fn lambda_schedule(step: u64, base: f64, horizon: f64) -> f64 {
    1.0 - (1.0 - base) / (1.0 + step as f64 / horizon)
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    alphas: Vec<f64>,
    observations: u64,
}

/// Discounted Dirichlet hyperparameters for every visited `(s, a)`.
///
/// Pairs that were never observed are not stored; their estimate is the
/// uniform distribution of the symmetric prior, or the smoothed prior model
/// if one is set.
#[derive(Clone)]
pub struct DirichletTable {
    template: Arc<dyn SuccessorTemplate>,
    schedule: LambdaSchedule,
    prior_strength: f64,
    prior_model: Option<Arc<dyn PriorModel>>,
    entries: FxHashMap<(StateVector, ActionId), Entry>,
}

impl std::fmt::Debug for DirichletTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirichletTable")
            .field("schedule", &self.schedule)
            .field("prior_strength", &self.prior_strength)
            .field("prior_model", &self.prior_model.is_some())
            .field("keys", &self.entries.len())
            .finish()
    }
}

impl DirichletTable {
    pub fn new(template: Arc<dyn SuccessorTemplate>, schedule: LambdaSchedule, prior_strength: f64) -> Result<Self> {
        schedule.validate()?;
        if !(prior_strength > 0.0 && prior_strength.is_finite()) {
            return Err(Error::InvalidParameter(format!("prior strength {prior_strength}")));
        }
        Ok(Self {
            template,
            schedule,
            prior_strength,
            prior_model: None,
            entries: FxHashMap::default(),
        })
    }

    /// Replaces the symmetric prior of unobserved keys by
    /// `prior_strength * (K * (1 - u) * p_j + u)` with `u = PRIOR_SMOOTHING`,
    /// which keeps the total prior mass at `K * prior_strength`.
    pub fn with_prior_model(mut self, model: Arc<dyn PriorModel>) -> Self {
        self.prior_model = Some(model);
        self
    }

    pub fn has_prior_model(&self) -> bool {
        self.prior_model.is_some()
    }

    fn prior_alphas(&self, s: &StateVector, a: ActionId) -> Result<Vec<f64>> {
        let k = self.template.candidate_count(s, a);
        let Some(model) = &self.prior_model else {
            return Ok(vec![self.prior_strength; k]);
        };
        let p = model.prior(self.template.as_ref(), s, a)?;
        if p.len() != k {
            return Err(Error::StructureMismatch {
                state: s.clone(),
                action: a,
                reason: format!("prior model gives {} probabilities for {k} candidates", p.len()),
            });
        }
        let kf = k as f64;
        Ok(p.iter()
            .map(|&q| self.prior_strength * (kf * (1.0 - PRIOR_SMOOTHING) * q + PRIOR_SMOOTHING))
            .collect())
    }

    /// Constant learning rate, prior strength 1.
    pub fn with_rate(template: Arc<dyn SuccessorTemplate>, lambda: f64) -> Result<Self> {
        Self::new(template, LambdaSchedule::Constant(lambda), 1.0)
    }

    pub fn template(&self) -> &Arc<dyn SuccessorTemplate> {
        &self.template
    }

    pub fn schedule(&self) -> LambdaSchedule {
        self.schedule
    }

    pub fn prior_strength(&self) -> f64 {
        self.prior_strength
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, s: &StateVector, a: ActionId) -> bool {
        self.entries.contains_key(&(s.clone(), a))
    }

    /// Current hyperparameters of `(s, a)`, if initialized.
    pub fn alphas(&self, s: &StateVector, a: ActionId) -> Option<&[f64]> {
        self.entries.get(&(s.clone(), a)).map(|e| e.alphas.as_slice())
    }

    /// Number of observations recorded for `(s, a)`.
    pub fn observations(&self, s: &StateVector, a: ActionId) -> u64 {
        self.entries.get(&(s.clone(), a)).map_or(0, |e| e.observations)
    }

    /// Inserts the prior for `(s, a)`: symmetric unless a prior model is set.
    pub fn init_prior(&mut self, s: &StateVector, a: ActionId) -> Result<&[f64]> {
        let key = (s.clone(), a);
        if self.entries.contains_key(&key) {
            return Err(Error::AlreadyInitialized {
                state: s.clone(),
                action: a,
            });
        }
        let alphas = self.prior_alphas(s, a)?;
        let entry = self.entries.entry(key).or_insert(Entry {
            alphas,
            observations: 0,
        });
        Ok(&entry.alphas)
    }

    /// Records the transition `(s, a) -> succ` using the scheduled rate.
    pub fn observe(&mut self, s: &StateVector, a: ActionId, succ: &StateVector) -> Result<&[f64]> {
        self.observe_inner(s, a, succ, None)
    }

    /// Records a transition with an explicit learning rate, ignoring the
    /// schedule (used for offline warm starts).
    pub fn observe_with_rate(
        &mut self,
        s: &StateVector,
        a: ActionId,
        succ: &StateVector,
        lambda: f64,
    ) -> Result<&[f64]> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidParameter(format!("learning rate {lambda}")));
        }
        self.observe_inner(s, a, succ, Some(lambda))
    }

    fn observe_inner(
        &mut self,
        s: &StateVector,
        a: ActionId,
        succ: &StateVector,
        lambda: Option<f64>,
    ) -> Result<&[f64]> {
        let j = self
            .template
            .candidate_index(s, a, succ)
            .ok_or_else(|| Error::SuccessorNotInTemplate {
                state: s.clone(),
                action: a,
                successor: succ.clone(),
            })?;
        let k = self.template.candidate_count(s, a);
        let key = (s.clone(), a);
        if !self.entries.contains_key(&key) {
            let alphas = self.prior_alphas(s, a)?;
            self.entries.insert(
                key.clone(),
                Entry {
                    alphas,
                    observations: 0,
                },
            );
        }
        let entry = self.entries.get_mut(&key).expect("inserted above");
        if entry.alphas.len() != k {
            return Err(Error::StructureMismatch {
                state: s.clone(),
                action: a,
                reason: format!("{} hyperparameters for {k} candidates", entry.alphas.len()),
            });
        }
        let lambda = lambda.unwrap_or_else(|| self.schedule.rate(entry.observations));
        for x in entry.alphas.iter_mut() {
            *x *= lambda;
        }
        entry.alphas[j] += 1.0;
        entry.observations += 1;
        Ok(&entry.alphas)
    }

    /// Posterior mean `alpha_j / sum_k alpha_k`, aligned with the candidates.
    pub fn estimate(&self, s: &StateVector, a: ActionId) -> Result<Vec<f64>> {
        match self.entries.get(&(s.clone(), a)) {
            Some(e) => {
                let k = self.template.candidate_count(s, a);
                if e.alphas.len() != k {
                    return Err(Error::StructureMismatch {
                        state: s.clone(),
                        action: a,
                        reason: format!("{} hyperparameters for {k} candidates", e.alphas.len()),
                    });
                }
                let total: f64 = e.alphas.iter().sum();
                Ok(e.alphas.iter().map(|x| x / total).collect())
            }
            None if self.prior_model.is_none() => {
                let k = self.template.candidate_count(s, a);
                Ok(vec![1.0 / k as f64; k])
            }
            None => {
                let alphas = self.prior_alphas(s, a)?;
                let total: f64 = alphas.iter().sum();
                Ok(alphas.iter().map(|x| x / total).collect())
            }
        }
    }

    /// Estimated distribution as explicit `(successor, probability)` pairs.
    pub fn distribution(&self, s: &StateVector, a: ActionId) -> Result<Vec<(StateVector, f64)>> {
        let p = self.estimate(s, a)?;
        let c = self.template.candidates(s, a);
        if c.len() != p.len() {
            return Err(Error::StructureMismatch {
                state: s.clone(),
                action: a,
                reason: "candidate list changed".into(),
            });
        }
        Ok(c.into_iter().zip(p).collect())
    }

    /// Replaces the template and discards every key, since candidate lists
    /// (and with them the alignment of stored hyperparameters) change.
    pub fn reset_with_template(&mut self, template: Arc<dyn SuccessorTemplate>) {
        self.template = template;
        self.entries.clear();
    }

    fn sorted_keys(&self) -> Vec<&(StateVector, ActionId)> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        keys
    }

    /// Writes the versioned binary snapshot of the table. A prior model is
    /// not part of the snapshot and has to be set again after loading.
    pub fn snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        let (kind, base, horizon) = match self.schedule {
            LambdaSchedule::Constant(l) => (0u8, l, 0.0),
            LambdaSchedule::Harmonic { base, horizon } => (1u8, base, horizon),
        };
        w.write_all(&[kind])?;
        w.write_all(&base.to_le_bytes())?;
        w.write_all(&horizon.to_le_bytes())?;
        w.write_all(&self.prior_strength.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for key in self.sorted_keys() {
            let e = &self.entries[key];
            let (s, a) = key;
            w.write_all(&(s.vars.len() as u32).to_le_bytes())?;
            for v in &s.vars {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[s.ctrl, a.0])?;
            w.write_all(&e.observations.to_le_bytes())?;
            w.write_all(&(e.alphas.len() as u32).to_le_bytes())?;
            for x in &e.alphas {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a snapshot written by [`DirichletTable::snapshot`].
    pub fn load<R: Read>(mut r: R, template: Arc<dyn SuccessorTemplate>) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::MalformedSnapshot("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != SNAPSHOT_VERSION {
            return Err(Error::VersionMismatch {
                expected: SNAPSHOT_VERSION,
                found: version,
            });
        }
        let [kind] = read_array::<1, _>(&mut r)?;
        let base = f64::from_le_bytes(read_array(&mut r)?);
        let horizon = f64::from_le_bytes(read_array(&mut r)?);
        let schedule = match kind {
            0 => LambdaSchedule::Constant(base),
            1 => LambdaSchedule::Harmonic { base, horizon },
            k => return Err(Error::MalformedSnapshot(format!("unknown schedule kind {k}"))),
        };
        let prior = f64::from_le_bytes(read_array(&mut r)?);
        let mut table = Self::new(template, schedule, prior).map_err(|e| Error::MalformedSnapshot(e.to_string()))?;
        let count = u64::from_le_bytes(read_array(&mut r)?);
        for _ in 0..count {
            let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
            if n > 1 << 16 {
                return Err(Error::MalformedSnapshot(format!("state width {n}")));
            }
            let mut vars = Vec::with_capacity(n);
            for _ in 0..n {
                vars.push(u32::from_le_bytes(read_array(&mut r)?));
            }
            let [ctrl, action] = read_array::<2, _>(&mut r)?;
            let observations = u64::from_le_bytes(read_array(&mut r)?);
            let k = u32::from_le_bytes(read_array(&mut r)?) as usize;
            if k > 1 << 24 {
                return Err(Error::MalformedSnapshot(format!("candidate count {k}")));
            }
            let mut alphas = Vec::with_capacity(k);
            for _ in 0..k {
                let x = f64::from_le_bytes(read_array(&mut r)?);
                if !(x > 0.0 && x.is_finite()) {
                    return Err(Error::MalformedSnapshot(format!("hyperparameter {x}")));
                }
                alphas.push(x);
            }
            let s = StateVector::new(&vars, ctrl);
            let a = ActionId(action);
            let expected = table.template.candidate_count(&s, a);
            if expected != k {
                return Err(Error::StructureMismatch {
                    state: s,
                    action: a,
                    reason: format!("snapshot has {k} candidates, template {expected}"),
                });
            }
            table.entries.insert((s, a), Entry { alphas, observations });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::MalformedSnapshot("trailing bytes".into()));
        }
        Ok(table)
    }

    /// True when both tables hold bit-identical hyperparameters.
    pub fn same_contents(&self, other: &Self) -> bool {
        self.schedule == other.schedule
            && self.prior_strength.to_bits() == other.prior_strength.to_bits()
            && self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, e)| {
                other.entries.get(k).is_some_and(|o| {
                    o.observations == e.observations
                        && o.alphas.len() == e.alphas.len()
                        && o.alphas.iter().zip(&e.alphas).all(|(x, y)| x.to_bits() == y.to_bits())
                })
            })
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"ADST";
pub const SNAPSHOT_VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::MalformedSnapshot("truncated stream".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Successors are `0..k` regardless of state; action-independent.
    struct Fixed(u32);

    impl SuccessorTemplate for Fixed {
        fn command_count(&self) -> usize {
            1
        }
        fn action_count(&self) -> usize {
            1
        }
        fn actions(&self, _: &StateVector) -> Vec<ActionId> {
            vec![ActionId(0)]
        }
        fn candidates(&self, _: &StateVector, _: ActionId) -> Vec<StateVector> {
            (0..self.0).map(|i| StateVector::new(&[i], 0)).collect()
        }
    }

    fn sv(i: u32) -> StateVector {
        StateVector::new(&[i], 0)
    }

    #[test]
    fn init_prior_is_symmetric() {
        let mut t = DirichletTable::with_rate(Arc::new(Fixed(162)), 0.9).unwrap();
        let a = t.init_prior(&sv(0), ActionId(0)).unwrap();
        assert_eq!(a, vec![1.0; 162].as_slice());
        assert!(matches!(
            t.init_prior(&sv(0), ActionId(0)),
            Err(Error::AlreadyInitialized { .. })
        ));
    }

    #[test]
    fn single_candidate_is_point_mass() {
        let mut t = DirichletTable::with_rate(Arc::new(Fixed(1)), 0.9).unwrap();
        assert_eq!(t.init_prior(&sv(3), ActionId(0)).unwrap(), &[1.0]);
        assert_eq!(t.estimate(&sv(3), ActionId(0)).unwrap(), vec![1.0]);
    }

    #[test]
    fn discounted_update() {
        let mut t = DirichletTable::with_rate(Arc::new(Fixed(162)), 0.9).unwrap();
        let a = t.observe(&sv(0), ActionId(0), &sv(17)).unwrap().to_vec();
        assert_eq!(a[17], 1.9);
        assert!(a.iter().enumerate().all(|(i, &x)| i == 17 || x == 0.9));
    }

    #[test]
    fn pure_counting_with_unit_rate() {
        let mut t = DirichletTable::with_rate(Arc::new(Fixed(5)), 1.0).unwrap();
        t.observe(&sv(0), ActionId(0), &sv(2)).unwrap();
        let a = t.observe(&sv(0), ActionId(0), &sv(2)).unwrap();
        assert_eq!(a, &[1.0, 1.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_observation_closed_form() {
        let k = 7;
        let mut t = DirichletTable::with_rate(Arc::new(Fixed(k)), 1.0).unwrap();
        for m in 1..=50u32 {
            t.observe(&sv(0), ActionId(0), &sv(3)).unwrap();
            let p = t.estimate(&sv(0), ActionId(0)).unwrap();
            let expect = (m as f64 + 1.0) / (m as f64 + k as f64);
            assert!((p[3] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_successor_leaves_table_untouched() {
        let mut t = DirichletTable::with_rate(Arc::new(Fixed(3)), 0.5).unwrap();
        let err = t.observe(&sv(0), ActionId(0), &sv(9)).unwrap_err();
        assert!(matches!(err, Error::SuccessorNotInTemplate { .. }));
        assert!(t.is_empty());
    }

    #[test]
    fn unvisited_estimate_is_uniform() {
        let t = DirichletTable::with_rate(Arc::new(Fixed(4)), 0.5).unwrap();
        assert_eq!(t.estimate(&sv(0), ActionId(0)).unwrap(), vec![0.25; 4]);
        assert!(t.is_empty());
    }

    #[test]
    fn schedule_values() {
        assert!((lambda_schedule(0, 0.3, 1000.0) - 0.3).abs() < 1e-15);
        assert!((lambda_schedule(1000, 0.3, 1000.0) - 0.65).abs() < 1e-15);
        assert!(lambda_schedule(u64::MAX, 0.3, 1000.0) > 1.0 - 1e-12);
        let s = LambdaSchedule::Harmonic {
            base: 0.3,
            horizon: 10.0,
        };
        let mut prev = 0.0;
        for step in 0..1000 {
            let r = s.rate(step);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn snapshot_roundtrip_and_errors() {
        let mut t = DirichletTable::new(
            Arc::new(Fixed(4)),
            LambdaSchedule::Harmonic {
                base: 0.3,
                horizon: 50.0,
            },
            0.7,
        )
        .unwrap();
        t.observe(&sv(0), ActionId(0), &sv(1)).unwrap();
        t.observe(&sv(1), ActionId(0), &sv(3)).unwrap();
        t.observe(&sv(2), ActionId(0), &sv(0)).unwrap();
        t.observe(&sv(2), ActionId(0), &sv(2)).unwrap();
        let bytes = t.snapshot_bytes();
        let back = DirichletTable::load(bytes.as_slice(), Arc::new(Fixed(4))).unwrap();
        assert!(back.same_contents(&t));
        assert_eq!(back.snapshot_bytes(), bytes);

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            DirichletTable::load(cut, Arc::new(Fixed(4))),
            Err(Error::MalformedSnapshot(_))
        ));
        let mut wrong = bytes.clone();
        wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            DirichletTable::load(wrong.as_slice(), Arc::new(Fixed(4))),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
        assert!(matches!(
            DirichletTable::load(bytes.as_slice(), Arc::new(Fixed(5))),
            Err(Error::StructureMismatch { .. })
        ));
    }
}
