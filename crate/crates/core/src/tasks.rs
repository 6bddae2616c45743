//! Toy environments with verifiable rewards and the group-relative advantage estimator.

use rand::seq::index;
use rand::Rng;

use crate::policy::{greedy_decode, sample_sequence, ContextLayout, PolicyError, PolicyNet, SequenceRecord};
use crate::rng::Streams;
use crate::Scalar;

/// A question `q`: an id, the feature vector fed into every decoding step, and the
/// reference answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<T> {
    pub id: u64,
    pub features: Vec<T>,
    pub target: Vec<usize>,
}

/// Single-step contextual bandit with a fixed reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditTask {
    /// `table[prompt][token]`, entries in `[0, 1]`.
    pub table: Vec<Vec<f64>>,
}

impl BanditTask {
    pub fn random<R: Rng + ?Sized>(n_prompts: usize, arms: usize, rng: &mut R) -> Self {
        let table = (0..n_prompts)
            .map(|_| (0..arms).map(|_| rng.gen::<f64>()).collect())
            .collect();
        Self { table }
    }

    pub fn arms(&self) -> usize {
        self.table.first().map_or(0, Vec::len)
    }

    pub fn best_arm(&self, prompt: usize) -> usize {
        let row = &self.table[prompt];
        (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
    }
}

/// Modular addition task: the prompt carries `(a, b)` with `a, b < modulus`; the answer
/// is `(a + b) mod modulus^horizon` written as `horizon` base-`modulus` digits, most
/// significant first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqTask {
    pub modulus: usize,
    pub horizon: usize,
    /// Reward 1/0 on the whole answer instead of the fraction of correct digits.
    pub exact_match: bool,
}

impl SeqTask {
    pub fn answer(&self, a: usize, b: usize) -> Vec<usize> {
        let mut value = a + b;
        let mut digits = vec![0; self.horizon];
        for d in digits.iter_mut().rev() {
            *d = value % self.modulus;
            value /= self.modulus;
        }
        digits
    }

    pub fn decode_id(&self, id: u64) -> (usize, usize) {
        let id = id as usize;
        (id / self.modulus, id % self.modulus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Bandit(BanditTask),
    Seq(SeqTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Bandit(_) => "bandit",
            Task::Seq(_) => "seqtask",
        }
    }

    pub fn layout(&self) -> ContextLayout {
        match self {
            Task::Bandit(b) => ContextLayout {
                vocab: b.arms(),
                horizon: 1,
                n_features: b.table.len(),
            },
            Task::Seq(s) => ContextLayout {
                vocab: s.modulus,
                horizon: s.horizon,
                n_features: 2 * s.modulus,
            },
        }
    }

    pub fn n_prompts(&self) -> usize {
        match self {
            Task::Bandit(b) => b.table.len(),
            Task::Seq(s) => s.modulus * s.modulus,
        }
    }

    pub fn prompt<T: Scalar>(&self, id: u64) -> Prompt<T> {
        match self {
            Task::Bandit(b) => {
                let mut features = vec![T::zero(); b.table.len()];
                features[id as usize] = T::one();
                Prompt {
                    id,
                    features,
                    target: vec![b.best_arm(id as usize)],
                }
            }
            Task::Seq(s) => {
                let (a, bb) = s.decode_id(id);
                let mut features = vec![T::zero(); 2 * s.modulus];
                features[a] = T::one();
                features[s.modulus + bb] = T::one();
                Prompt {
                    id,
                    features,
                    target: s.answer(a, bb),
                }
            }
        }
    }

    /// Training reward; always in `[0, 1]`.
    pub fn reward<T: Scalar>(&self, prompt: &Prompt<T>, tokens: &[usize]) -> T {
        match self {
            Task::Bandit(b) => bandit_reward(b, prompt, tokens),
            Task::Seq(s) => seq_task_reward(s, prompt, tokens),
        }
    }

    /// Held-out prompts are those whose id hashes into the last of five buckets.
    pub fn is_heldout(&self, id: u64) -> bool {
        split_hash(id).is_multiple_of(5)
    }

    pub fn train_prompts<T: Scalar>(&self) -> Vec<Prompt<T>> {
        (0..self.n_prompts() as u64)
            .filter(|&id| !self.is_heldout(id))
            .map(|id| self.prompt(id))
            .collect()
    }

    pub fn heldout_prompts<T: Scalar>(&self) -> Vec<Prompt<T>> {
        (0..self.n_prompts() as u64)
            .filter(|&id| self.is_heldout(id))
            .map(|id| self.prompt(id))
            .collect()
    }
}

fn split_hash(id: u64) -> u64 {
    let mut z = id.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn bandit_reward<T: Scalar>(task: &BanditTask, prompt: &Prompt<T>, tokens: &[usize]) -> T {
    T::lit(task.table[prompt.id as usize][tokens[0]])
}

pub fn seq_task_reward<T: Scalar>(task: &SeqTask, prompt: &Prompt<T>, tokens: &[usize]) -> T {
    let correct = prompt.target.iter().zip(tokens).filter(|(a, b)| a == b).count();
    if task.exact_match {
        if correct == prompt.target.len() && tokens.len() == prompt.target.len() {
            T::one()
        } else {
            T::zero()
        }
    } else {
        T::from_usize_lossy(correct) / T::from_usize_lossy(prompt.target.len().max(1))
    }
}

/// Group-relative advantages: `r_i - mean(r)`, optionally divided by `std(r) + 1e-6`
/// (population standard deviation).
pub fn group_advantages<T: Scalar>(rewards: &[T], normalize_std: bool) -> Vec<T> {
    let n = T::from_usize_lossy(rewards.len().max(1));
    let mean = rewards.iter().copied().sum::<T>() / n;
    let centered: Vec<T> = rewards.iter().map(|&r| r - mean).collect();
    if !normalize_std {
        return centered;
    }
    let var = centered.iter().map(|&c| c * c).sum::<T>() / n;
    let denom = var.sqrt() + T::lit(1e-6);
    centered.into_iter().map(|c| c / denom).collect()
}

/// `G` sampled answers to one prompt with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group<T> {
    pub prompt: Prompt<T>,
    pub records: Vec<SequenceRecord<T>>,
    pub rewards: Vec<T>,
    pub advantages: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Microbatch<T> {
    pub groups: Vec<Group<T>>,
}

impl<T: Scalar> Microbatch<T> {
    pub fn records(&self) -> impl Iterator<Item = &SequenceRecord<T>> {
        self.groups.iter().flat_map(|g| g.records.iter())
    }

    pub fn record_refs(&self) -> Vec<&SequenceRecord<T>> {
        self.records().collect()
    }

    pub fn advantages(&self) -> Vec<T> {
        self.groups.iter().flat_map(|g| g.advantages.iter().copied()).collect()
    }

    pub fn rewards(&self) -> Vec<T> {
        self.groups.iter().flat_map(|g| g.rewards.iter().copied()).collect()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Prompt<T>> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(&g.prompt, g.records.len()))
    }

    pub fn n_sequences(&self) -> usize {
        self.groups.iter().map(|g| g.records.len()).sum()
    }

    pub fn mean_reward(&self) -> T {
        let r = self.rewards();
        r.iter().copied().sum::<T>() / T::from_usize_lossy(r.len().max(1))
    }
}

/// Samples one group per prompt. Sample `i` of group `g` draws from stream `(g, i)`.
pub fn sample_microbatch<T: Scalar>(
    net: &PolicyNet<T>,
    task: &Task,
    prompts: &[Prompt<T>],
    group_size: usize,
    normalize_std: bool,
    streams: Streams,
) -> Result<Microbatch<T>, PolicyError> {
    let mut groups = Vec::with_capacity(prompts.len());
    for (g, prompt) in prompts.iter().enumerate() {
        let gs = streams.index(g as u64);
        let mut records = Vec::with_capacity(group_size);
        let mut rewards = Vec::with_capacity(group_size);
        for i in 0..group_size {
            let rec = sample_sequence(net, prompt, &mut gs.index(i as u64).rng())?;
            rewards.push(task.reward(prompt, &rec.tokens));
            records.push(rec);
        }
        let advantages = group_advantages(&rewards, normalize_std);
        groups.push(Group {
            prompt: prompt.clone(),
            records,
            rewards,
            advantages,
        });
    }
    Ok(Microbatch { groups })
}

/// Picks `n` distinct prompts (all of them if `n` exceeds the pool).
pub fn choose_prompts<T: Scalar, R: Rng + ?Sized>(pool: &[Prompt<T>], n: usize, rng: &mut R) -> Vec<Prompt<T>> {
    let n = n.min(pool.len());
    index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Mean exact-match score under greedy decoding.
pub fn validation_score<T: Scalar>(net: &PolicyNet<T>, heldout: &[Prompt<T>]) -> Result<T, PolicyError> {
    if heldout.is_empty() {
        return Ok(T::zero());
    }
    let mut hits = 0usize;
    for p in heldout {
        if greedy_decode(net, &p.features)? == p.target {
            hits += 1;
        }
    }
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(heldout.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::policy::LayerWeights;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn advantages_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0], false), vec![0.5, -0.5, -0.5, 0.5]);
        assert_eq!(group_advantages(&[1.0; 4], false), vec![0.0; 4]);
        assert_eq!(group_advantages(&[1.0; 4], true), vec![0.0; 4]);
        let a = group_advantages(&[2.0f64, 0.0], true);
        assert!((a[0] - 1.0).abs() < 1e-5 && (a[1] + 1.0).abs() < 1e-5);
        assert!((a[0] - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rewards in proptest::collection::vec(-10.0f64..10.0, 2..20), std in any::<bool>()) {
            let a = group_advantages(&rewards, std);
            let maxr = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1e-300);
            let bound = 1e-12 * rewards.len() as f64 * maxr * if std { 1e6 } else { 1.0 };
            prop_assert!(a.iter().sum::<f64>().abs() <= bound);
        }
    }

    #[test]
    fn rewards_examples() {
        let bandit = BanditTask {
            table: vec![vec![1.0, 0.2, 0.0]],
        };
        let task = Task::Bandit(bandit.clone());
        let p: Prompt<f64> = task.prompt(0);
        assert_eq!(bandit_reward(&bandit, &p, &[0]), 1.0);
        assert_eq!(p.target, vec![0]);

        let s = SeqTask {
            modulus: 10,
            horizon: 1,
            exact_match: false,
        };
        let task = Task::Seq(s);
        let p: Prompt<f64> = task.prompt(12); // a=1, b=2
        assert_eq!(s.decode_id(12), (1, 2));
        assert_eq!(seq_task_reward(&s, &p, &[3]), 1.0);

        let s3 = SeqTask {
            modulus: 16,
            horizon: 3,
            exact_match: false,
        };
        assert_eq!(s3.answer(9, 8), vec![0, 1, 1]);
        let p: Prompt<f64> = Task::Seq(s3).prompt(9 * 16 + 8);
        assert!((seq_task_reward(&s3, &p, &[0, 1, 5]) - 2.0 / 3.0).abs() < 1e-15);
        let exact = SeqTask {
            exact_match: true,
            ..s3
        };
        assert_eq!(seq_task_reward(&exact, &p, &[0, 1, 5]), 0.0);
        assert_eq!(seq_task_reward(&exact, &p, &[0, 1, 1]), 1.0);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let task = Task::Seq(SeqTask {
            modulus: 16,
            horizon: 3,
            exact_match: false,
        });
        let train: Vec<Prompt<f64>> = task.train_prompts();
        let held: Vec<Prompt<f64>> = task.heldout_prompts();
        assert_eq!(train.len() + held.len(), 256);
        assert!(train.iter().all(|p| held.iter().all(|h| h.id != p.id)));
        let frac = held.len() as f64 / 256.0;
        assert!((0.1..0.3).contains(&frac), "{frac}");
    }

    #[test]
    fn perfect_policy_scores_one() {
        // bandit: bias column points at the best arm of each prompt through the one-hot features
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let bandit = BanditTask::random(10, 4, &mut rng);
        let task = Task::Bandit(bandit.clone());
        let layout = task.layout();
        let mut w = Matrix::zeros(4, layout.dim() + 1);
        for p in 0..10 {
            w[(bandit.best_arm(p), layout.vocab + layout.horizon + p)] = 5.0;
        }
        let net = PolicyNet::from_layers(layout, vec![LayerWeights { weight: w }]).unwrap();
        let all: Vec<Prompt<f64>> = (0..10).map(|i| task.prompt(i)).collect();
        assert_eq!(validation_score(&net, &all).unwrap(), 1.0);
    }

    #[test]
    fn zero_net_hits_base_rate() {
        let task = Task::Seq(SeqTask {
            modulus: 10,
            horizon: 1,
            exact_match: true,
        });
        let net = PolicyNet::<f64>::zeros(task.layout(), &[8]);
        let all: Vec<Prompt<f64>> = (0..100).map(|i| task.prompt(i)).collect();
        // greedy picks token 0; exactly 10 of the 100 (a, b) pairs sum to 0 mod 10
        assert!((validation_score(&net, &all).unwrap() - 0.1).abs() < 1e-12);
        let held: Vec<Prompt<f64>> = task.heldout_prompts();
        let score = validation_score(&net, &held).unwrap();
        assert!(score < 0.3);
    }

    #[test]
    fn microbatch_sampling_is_reproducible() {
        let task = Task::Seq(SeqTask {
            modulus: 5,
            horizon: 2,
            exact_match: false,
        });
        let net = PolicyNet::<f64>::new(task.layout(), &[6], &mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        let prompts: Vec<Prompt<f64>> = (0..3).map(|i| task.prompt(i)).collect();
        let a = sample_microbatch(&net, &task, &prompts, 4, false, Streams::new(1)).unwrap();
        let b = sample_microbatch(&net, &task, &prompts, 4, false, Streams::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_sequences(), 12);
        for g in &a.groups {
            assert!(g.advantages.iter().sum::<f64>().abs() < 1e-12);
            assert!(g.rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }
}
