//! Loss-driven augmentation: per mini-batch, find the non-majority label with
//! the highest mean loss and generate a few synthetic instances for it.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CitationInstance, Intent, AUTHOR_TAG};
use crate::error::{Error, Result};

/// Samples generated per augmentation step unless configured otherwise.
pub const DEFAULT_SAMPLES_PER_STEP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLoss {
    pub mean: f64,
    pub count: usize,
}

/// Mean loss and sample count for each label present in one mini-batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLabelMap {
    pub step: usize,
    entries: BTreeMap<Intent, LabelLoss>,
}

impl LossLabelMap {
    pub fn get(&self, label: Intent) -> Option<LabelLoss> {
        self.entries.get(&label).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Intent, LabelLoss)> + '_ {
        self.entries.iter().map(|(&l, &v)| (l, v))
    }

    /// The label whose count exceeds every other label's, if one does.
    pub fn majority(&self) -> Option<Intent> {
        let mut best: Option<(Intent, usize)> = None;
        let mut tied = false;
        for (label, v) in self.iter() {
            match best {
                Some((_, n)) if v.count == n => tied = true,
                Some((_, n)) if v.count < n => {}
                _ => {
                    best = Some((label, v.count));
                    tied = false;
                }
            }
        }
        if tied {
            None
        } else {
            best.map(|(l, _)| l)
        }
    }
}

/// Groups `losses` by label. Each mean is summed in ascending order, so the
/// result does not depend on batch order.
pub fn per_label_loss(step: usize, labels: &[Intent], losses: &[f64]) -> Result<LossLabelMap> {
    if labels.len() != losses.len() {
        return Err(Error::shape(
            "per_label_loss",
            format!("{} labels", labels.len()),
            format!("{} losses", losses.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Domain("per_label_loss needs a non-empty batch".into()));
    }
    let mut groups: BTreeMap<Intent, Vec<f64>> = BTreeMap::new();
    for (&label, &loss) in labels.iter().zip(losses) {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::Domain(format!("loss {loss} for label {label} is not a finite non-negative value")));
        }
        groups.entry(label).or_default().push(loss);
    }
    let entries = groups
        .into_iter()
        .map(|(label, mut values)| {
            values.sort_by(f64::total_cmp);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (label, LabelLoss { mean, count: values.len() })
        })
        .collect();
    Ok(LossLabelMap { step, entries })
}

/// Highest-mean-loss label other than `majority`; ties go to the lowest id.
pub fn select_augmentation_target(map: &LossLabelMap, majority: Option<Intent>) -> Option<Intent> {
    let mut best: Option<(Intent, f64)> = None;
    for (label, v) in map.iter() {
        if Some(label) == majority {
            continue;
        }
        if best.is_none_or(|(_, m)| v.mean > m) {
            best = Some((label, v.mean));
        }
    }
    best.map(|(l, _)| l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorRequest {
    pub label: Intent,
    pub seeds: Vec<CitationInstance>,
    pub count: usize,
}

impl GeneratorRequest {
    pub fn new(label: Intent, seeds: Vec<CitationInstance>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Domain("generator request must ask for at least one sample".into()));
        }
        if seeds.is_empty() {
            return Err(Error::Domain("generator request needs at least one seed".into()));
        }
        if let Some(s) = seeds.iter().find(|s| s.label != label) {
            return Err(Error::Domain(format!("seed {} is labeled {}, not {label}", s.core_id, s.label)));
        }
        Ok(GeneratorRequest { label, seeds, count })
    }
}

/// Produces synthetic instances for a request.
pub trait Generator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<CitationInstance>>;
}

fn normalized(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Calls the generator and checks its output: exactly `count` instances with
/// the target label, flagged synthetic, each differing from every seed.
pub fn generate_samples(req: &GeneratorRequest, generator: &mut dyn Generator) -> Result<Vec<CitationInstance>> {
    let mut out = generator.generate(req)?;
    if out.len() < req.count {
        return Err(Error::Generation(format!(
            "generator returned {} samples, {} requested",
            out.len(),
            req.count
        )));
    }
    out.truncate(req.count);
    let seeds: Vec<String> = req.seeds.iter().map(|s| normalized(&s.cited_sentence)).collect();
    for inst in &mut out {
        inst.label = req.label;
        inst.synthetic = true;
        inst.validate().map_err(|e| Error::Generation(e.to_string()))?;
        if seeds.contains(&normalized(&inst.cited_sentence)) {
            return Err(Error::Generation(format!(
                "generated sentence repeats a seed: {}",
                inst.cited_sentence
            )));
        }
    }
    Ok(out)
}

fn synthetic_from(seed: &CitationInstance, cited: String) -> CitationInstance {
    CitationInstance {
        core_id: seed.core_id.clone(),
        first_sentence: seed.first_sentence.clone(),
        cited_sentence: cited,
        second_sentence: seed.second_sentence.clone(),
        label: seed.label,
        synthetic: true,
    }
}

/// Built-in generator: random token dropout, adjacent swaps and duplication
/// applied to the cited sentence. `#AUTHOR_TAG` is never dropped, moved or
/// duplicated. Seeded, so repeated runs give identical output.
#[derive(Clone, Debug)]
pub struct PerturbationGenerator {
    rng: ChaCha8Rng,
    pub dropout: f64,
    pub swap: f64,
    pub duplicate: f64,
}

const PERTURBATION_ATTEMPTS: usize = 16;

impl PerturbationGenerator {
    pub fn new(seed: u64) -> Self {
        PerturbationGenerator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout: 0.1,
            swap: 0.1,
            duplicate: 0.1,
        }
    }

    fn perturb(&mut self, sentence: &str) -> String {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let mut out: Vec<&str> = Vec::with_capacity(words.len() + 2);
        let mut edits = 0;
        for &w in &words {
            if w.contains(AUTHOR_TAG) {
                out.push(w);
            } else if self.rng.gen_bool(self.dropout) {
                edits += 1;
            } else if self.rng.gen_bool(self.duplicate) {
                out.extend([w, w]);
                edits += 1;
            } else {
                out.push(w);
            }
        }
        let mut i = 0;
        while i + 1 < out.len() {
            if movable(out[i]) && movable(out[i + 1]) && out[i] != out[i + 1] && self.rng.gen_bool(self.swap) {
                out.swap(i, i + 1);
                edits += 1;
                i += 2;
            } else {
                i += 1;
            }
        }
        if edits == 0 {
            self.force_edit(&mut out);
        }
        out.join(" ")
    }

    fn force_edit(&mut self, out: &mut Vec<&str>) {
        let free: Vec<usize> = (0..out.len()).filter(|&i| movable(out[i])).collect();
        if free.is_empty() {
            return;
        }
        let swaps: Vec<usize> = (0..out.len().saturating_sub(1))
            .filter(|&i| movable(out[i]) && movable(out[i + 1]) && out[i] != out[i + 1])
            .collect();
        let at = free[self.rng.gen_range(0..free.len())];
        match self.rng.gen_range(0..3) {
            0 if free.len() > 1 => {
                out.remove(at);
            }
            1 if !swaps.is_empty() => {
                let s = swaps[self.rng.gen_range(0..swaps.len())];
                out.swap(s, s + 1);
            }
            _ => out.insert(at, out[at]),
        }
    }
}

fn movable(word: &str) -> bool {
    !word.contains(AUTHOR_TAG)
}

impl Generator for PerturbationGenerator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<CitationInstance>> {
        let seeds: Vec<String> = req.seeds.iter().map(|s| normalized(&s.cited_sentence)).collect();
        let mut out = Vec::with_capacity(req.count);
        for i in 0..req.count {
            let seed = &req.seeds[i % req.seeds.len()];
            let fresh = (0..PERTURBATION_ATTEMPTS)
                .map(|_| self.perturb(&seed.cited_sentence))
                .find(|s| !seeds.contains(s))
                .ok_or_else(|| {
                    Error::Generation(format!("cannot perturb {:?} into a new sentence", seed.cited_sentence))
                })?;
            out.push(synthetic_from(seed, fresh));
        }
        Ok(out)
    }
}

/// Client for an external text-generation service.
///
/// Sends `{"label": int, "seeds": [str], "count": int}` as a JSON POST and
/// expects `{"samples": [str]}` back. Each sample becomes the cited sentence
/// of a new instance whose neighbours are copied from the seeds in turn.
pub struct HttpGenerator {
    url: String,
    agent: ureq::Agent,
}

pub const DEFAULT_GENERATOR_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Serialize)]
struct WireRequest<'a> {
    label: u8,
    seeds: Vec<&'a str>,
    count: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    samples: Vec<String>,
}

impl HttpGenerator {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpGenerator { url: url.into(), agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Generator for HttpGenerator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<CitationInstance>> {
        let body = WireRequest {
            label: req.label.into(),
            seeds: req.seeds.iter().map(|s| s.cited_sentence.as_str()).collect(),
            count: req.count,
        };
        let fail = |what: String| Error::Generation(format!("{}: {what}", self.url));
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| fail(e.to_string()))?;
        let status = response.status();
        if status != 200 {
            return Err(fail(format!("status {status}")));
        }
        let parsed: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| fail(format!("malformed response: {e}")))?;
        Ok(parsed
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, text)| synthetic_from(&req.seeds[i % req.seeds.len()], text))
            .collect())
    }
}

/// Outcome of one augmentation step.
#[derive(Clone, Debug, PartialEq)]
pub struct TeaStep {
    pub losses: LossLabelMap,
    pub target: Option<Intent>,
    pub samples: Vec<CitationInstance>,
}

/// Per-label losses, target selection and generation for one mini-batch.
/// The samples are meant for the next batch. Without a generator, or when
/// generation fails, no samples are produced; failures are logged.
pub fn tea_step<'g>(
    step: usize,
    batch: &[CitationInstance],
    losses: &[f64],
    generator: Option<&mut (dyn Generator + 'g)>,
    k: usize,
) -> Result<TeaStep> {
    let labels: Vec<Intent> = batch.iter().map(|i| i.label).collect();
    let map = per_label_loss(step, &labels, losses)?;
    let target = select_augmentation_target(&map, map.majority());
    let mut samples = Vec::new();
    if let (Some(label), Some(generator)) = (target, generator) {
        let seeds: Vec<CitationInstance> = batch.iter().filter(|i| i.label == label).cloned().collect();
        let attempt = GeneratorRequest::new(label, seeds, k).and_then(|req| generate_samples(&req, generator));
        match attempt {
            Ok(s) => samples = s,
            Err(e) => log::warn!("augmentation step {step} for {label} produced nothing: {e}"),
        }
    }
    Ok(TeaStep {
        losses: map,
        target,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(ids: &[usize]) -> Vec<Intent> {
        ids.iter().map(|&i| Intent::ALL[i]).collect()
    }

    fn inst(label: Intent, cited: &str) -> CitationInstance {
        CitationInstance {
            core_id: "c1".into(),
            first_sentence: "Before.".into(),
            cited_sentence: cited.into(),
            second_sentence: "<EOF>".into(),
            label,
            synthetic: false,
        }
    }

    #[test]
    fn direct_means() {
        let m = per_label_loss(3, &labels(&[0, 0, 1]), &[1.0, 3.0, 5.0]).unwrap();
        assert_eq!(m.step, 3);
        assert_eq!(m.len(), 2);
        assert_eq!(m.get(Intent::Background), Some(LabelLoss { mean: 2.0, count: 2 }));
        assert_eq!(m.get(Intent::CompareContrast), Some(LabelLoss { mean: 5.0, count: 1 }));
        assert_eq!(m.majority(), Some(Intent::Background));
    }

    #[test]
    fn single_label_batch() {
        let m = per_label_loss(0, &labels(&[2, 2]), &[0.5, 0.7]).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(select_augmentation_target(&m, m.majority()), None);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(per_label_loss(0, &labels(&[0]), &[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(per_label_loss(0, &labels(&[0]), &[-1.0]), Err(Error::Domain(_))));
        assert!(per_label_loss(0, &labels(&[0]), &[f64::NAN]).is_err());
        assert!(per_label_loss(0, &[], &[]).is_err());
    }

    #[test]
    fn target_is_highest_non_majority() {
        let m = per_label_loss(0, &labels(&[0, 0, 0, 1, 2]), &[0.2, 0.2, 0.2, 0.9, 0.1]).unwrap();
        assert_eq!(select_augmentation_target(&m, Some(Intent::Background)), Some(Intent::CompareContrast));
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let m = per_label_loss(0, &labels(&[0, 0, 0, 1, 2]), &[0.1, 0.1, 0.1, 0.5, 0.5]).unwrap();
        assert_eq!(select_augmentation_target(&m, m.majority()), Some(Intent::CompareContrast));
    }

    #[test]
    fn balanced_batch_has_no_majority() {
        let m = per_label_loss(0, &labels(&[0, 1, 2]), &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.majority(), None);
        assert_eq!(select_augmentation_target(&m, None), Some(Intent::Background));
    }

    #[test]
    fn perturbation_contract() {
        let seed = inst(Intent::Future, "We will extend #AUTHOR_TAG to longer documents in future work.");
        let req = GeneratorRequest::new(Intent::Future, vec![seed.clone()], 2).unwrap();
        let mut g = PerturbationGenerator::new(9);
        let out = generate_samples(&req, &mut g).unwrap();
        assert_eq!(out.len(), 2);
        for s in &out {
            assert!(s.synthetic);
            assert_eq!(s.label, Intent::Future);
            assert_ne!(s.cited_sentence, seed.cited_sentence);
            assert_eq!(s.cited_sentence.matches(AUTHOR_TAG).count(), 1);
            assert_eq!((&s.first_sentence, &s.second_sentence), (&seed.first_sentence, &seed.second_sentence));
        }
        let again = generate_samples(&req, &mut PerturbationGenerator::new(9)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn unperturbable_seed_is_a_generation_error() {
        let req = GeneratorRequest::new(Intent::Uses, vec![inst(Intent::Uses, "#AUTHOR_TAG")], 1).unwrap();
        assert!(matches!(
            generate_samples(&req, &mut PerturbationGenerator::new(0)),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn request_contract() {
        let s = inst(Intent::Uses, "x #AUTHOR_TAG y");
        assert!(GeneratorRequest::new(Intent::Uses, vec![s.clone()], 0).is_err());
        assert!(GeneratorRequest::new(Intent::Uses, vec![], 1).is_err());
        assert!(GeneratorRequest::new(Intent::Future, vec![s], 1).is_err());
    }

    #[test]
    fn skewed_batch_augments_the_loud_minority() {
        let mut batch = vec![inst(Intent::Background, "Prior work #AUTHOR_TAG studied this problem."); 6];
        batch.push(inst(Intent::Motivation, "This gap motivates us, as #AUTHOR_TAG noted earlier."));
        batch.push(inst(Intent::Motivation, "Following #AUTHOR_TAG we address the open issue."));
        let losses = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 1.5, 1.2];
        let mut g = PerturbationGenerator::new(1);
        let step = tea_step(4, &batch, &losses, Some(&mut g), 2).unwrap();
        let labels: Vec<Intent> = batch.iter().map(|i| i.label).collect();
        let oracle = per_label_loss(4, &labels, &losses).unwrap();
        assert_eq!(step.target, select_augmentation_target(&oracle, oracle.majority()));
        assert_eq!(step.target, Some(Intent::Motivation));
        assert_eq!(step.samples.len(), 2);
        assert!(step.samples.iter().all(|s| s.label == Intent::Motivation && s.synthetic));
    }

    #[test]
    fn without_generator_nothing_is_produced() {
        let batch = vec![inst(Intent::Background, "a #AUTHOR_TAG b"), inst(Intent::Uses, "c #AUTHOR_TAG d")];
        let step = tea_step(0, &batch, &[0.1, 0.9], None, 2).unwrap();
        assert_eq!(step.target, Some(Intent::Uses));
        assert!(step.samples.is_empty());
    }

    #[test]
    fn one_label_batch_yields_nothing() {
        let batch = vec![inst(Intent::Uses, "c #AUTHOR_TAG d"); 3];
        let mut g = PerturbationGenerator::new(0);
        let step = tea_step(0, &batch, &[0.1, 0.9, 0.3], Some(&mut g), 2).unwrap();
        assert!(step.samples.is_empty());
    }

    fn batch() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..6, n),
                proptest::collection::vec(0.0f64..10.0, n),
            )
        })
    }

    fn group_by_oracle(ids: &[usize], losses: &[f64]) -> BTreeMap<usize, (f64, usize)> {
        let mut out: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (&i, &l) in ids.iter().zip(losses) {
            let e = out.entry(i).or_default();
            e.0 += l;
            e.1 += 1;
        }
        out.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn means_match_group_by((ids, losses) in batch()) {
            let m = per_label_loss(0, &labels(&ids), &losses).unwrap();
            let oracle = group_by_oracle(&ids, &losses);
            prop_assert_eq!(m.len(), oracle.len());
            for (k, (mean, n)) in oracle {
                let got = m.get(Intent::ALL[k]).unwrap();
                prop_assert_eq!(got.count, n);
                prop_assert!((got.mean - mean).abs() <= 1e-12 * mean.max(1.0));
            }
        }

        #[test]
        fn order_does_not_matter((ids, losses) in batch(), rot in 0usize..40) {
            let n = ids.len();
            let r = rot % n;
            let ids2: Vec<usize> = ids[r..].iter().chain(&ids[..r]).copied().rev().collect();
            let losses2: Vec<f64> = losses[r..].iter().chain(&losses[..r]).copied().rev().collect();
            let a = per_label_loss(0, &labels(&ids), &losses).unwrap();
            let b = per_label_loss(0, &labels(&ids2), &losses2).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn target_matches_argmax_oracle((ids, losses) in batch()) {
            let m = per_label_loss(0, &labels(&ids), &losses).unwrap();
            let oracle = group_by_oracle(&ids, &losses);
            let max_count = oracle.values().map(|v| v.1).max().unwrap();
            let leaders: Vec<usize> = oracle.iter().filter(|(_, v)| v.1 == max_count).map(|(&k, _)| k).collect();
            let majority = (leaders.len() == 1).then(|| leaders[0]);
            let mut want: Option<(usize, f64)> = None;
            for (&k, &(mean, _)) in &oracle {
                if Some(k) != majority && want.is_none_or(|(_, best)| mean > best) {
                    want = Some((k, mean));
                }
            }
            let got = select_augmentation_target(&m, m.majority());
            prop_assert_eq!(got.map(Intent::index), want.map(|w| w.0));
            if let (Some(g), Some(maj)) = (got, majority) {
                prop_assert_ne!(g.index(), maj);
            }
        }
    }
}
