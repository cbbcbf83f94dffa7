use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ledger::{sha256_file, write_stats_csv, PhaseRecord, RunLedger, LEDGER_FILE};
use super::pretrain::heldout_documents;
use super::PipelineError;
use crate::datagen::{
    audit_pairs, generate_pairs, refine_pairs, DemoDomain, GenerationOutcome, IterationRates, PromptTemplate, QuestionItem,
    Rejection, TruthPair,
};
use crate::eval::{evaluate, pairwise_distances, summarize, EvalInputs, EvalReport, ReportMeta, HISTOGRAM_BINS};
use crate::jsonl;
use crate::lm::{attach_adapters, save_checkpoint, AdapterSpec, ModelHandle, RoleTag, SamplingPolicy};
use crate::seeds;
use crate::train::{encode_pairs, train_dpo, DpoConfig, StepStats};
use crate::world::{
    build_world, make_mc_benchmark, make_question_pools, CorpusConfig, FactWorld, McQuestion, QaDatasetSplit,
    QuestionPools, TokenId,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub entities: usize,
    pub attributes: usize,
    pub corpus: CorpusConfig,
    /// Incorrect options per benchmark item.
    pub mc_distractors: usize,
    pub heldout_docs: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            entities: 60,
            attributes: 6,
            corpus: CorpusConfig::default(),
            mc_distractors: 3,
            heldout_docs: 400,
        }
    }
}

/// A world with its question pools, the in-domain test benchmark and the
/// held-out documents.
pub struct Setting {
    pub config: WorldConfig,
    pub world: FactWorld,
    pub pools: QuestionPools,
    pub benchmark: Vec<McQuestion>,
    pub heldout: Vec<Vec<TokenId>>,
}

impl Setting {
    pub fn build(config: &WorldConfig) -> Result<Self, PipelineError> {
        let world = build_world(config.seed, config.entities, config.attributes)?;
        let pools = make_question_pools(&world)?;
        let benchmark = make_mc_benchmark(&pools.in_domain_test, config.mc_distractors)?;
        let heldout = heldout_documents(&world, &config.corpus, config.heldout_docs)?;
        Ok(Self {
            config: config.clone(),
            world,
            pools,
            benchmark,
            heldout,
        })
    }

    pub fn eval_inputs(&self, model_id: &str, seed: u64) -> EvalInputs<'_> {
        EvalInputs {
            vocab: self.world.vocab(),
            benchmark: &self.benchmark,
            heldout: Some(&self.heldout),
            meta: ReportMeta {
                model_id: model_id.to_string(),
                benchmark_id: format!("in-domain-test/world-{}", self.config.seed),
                seed,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// The reference of each phase is the model the phase starts from.
    CurrentBase,
    /// Every phase uses the pretrained model as reference.
    FixedPretrained,
}

impl ReferencePolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferencePolicy::CurrentBase => "current-base",
            ReferencePolicy::FixedPretrained => "fixed-pretrained",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSettings {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.95,
            max_new_tokens: 32,
        }
    }
}

impl SamplingSettings {
    /// Policy that stops at a blank line or end of sequence.
    pub fn policy(&self, world: &FactWorld) -> SamplingPolicy {
        let v = world.vocab();
        SamplingPolicy {
            temperature: self.temperature,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            stop: vec![vec![v.newline(), v.newline()], vec![v.eos()]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub demonstrations: usize,
    pub domain: DemoDomain,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            demonstrations: crate::datagen::DEFAULT_DEMOS,
            domain: DemoDomain::InDomain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSeeds {
    pub demonstrations: u64,
    pub questions: u64,
    pub generate: u64,
    pub refine: u64,
    pub adapter: u64,
    pub dpo: u64,
}

impl Default for StageSeeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

impl StageSeeds {
    pub fn from_base(seed: u64) -> Self {
        Self {
            demonstrations: seeds::derive(seed, "stage-demonstrations", 0),
            questions: seeds::derive(seed, "stage-questions", 0),
            generate: seeds::derive(seed, "stage-generate", 0),
            refine: seeds::derive(seed, "stage-refine", 0),
            adapter: seeds::derive(seed, "stage-adapter", 0),
            dpo: seeds::derive(seed, "stage-dpo", 0),
        }
    }
}

/// DPO step size for the toy model. Adapter updates at the generic 1e-3
/// overwrite the pretrained knowledge within a few dozen steps.
pub const DESK_DPO_LEARNING_RATE: f64 = 5e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Refine/update iterations after self-truthifying; the run has
    /// `iterations + 1` DPO phases.
    pub iterations: usize,
    /// OOD questions prompted for pairs.
    pub pair_budget: usize,
    /// Abort when fewer pairs parse; defaults to half the budget.
    pub min_pairs: Option<usize>,
    pub dpo: DpoConfig,
    pub reference_policy: ReferencePolicy,
    pub template: TemplateConfig,
    pub sampling: SamplingSettings,
    pub adapter: AdapterSpec,
    pub seeds: StageSeeds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            pair_budget: 256,
            min_pairs: None,
            dpo: DpoConfig {
                learning_rate: DESK_DPO_LEARNING_RATE,
                ..DpoConfig::default()
            },
            reference_policy: ReferencePolicy::CurrentBase,
            template: TemplateConfig::default(),
            sampling: SamplingSettings::default(),
            adapter: AdapterSpec::default(),
            seeds: StageSeeds::default(),
        }
    }
}

impl PipelineConfig {
    pub fn dpo_phases(&self) -> usize {
        self.iterations + 1
    }

    pub fn min_pairs_floor(&self) -> usize {
        self.min_pairs.unwrap_or(self.pair_budget.div_ceil(2))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.pair_budget == 0 {
            return Err(PipelineError::InvalidConfig("pair_budget must be at least 1".into()));
        }
        self.dpo.validate()?;
        Ok(())
    }
}

/// Evaluation and bookkeeping of one DPO phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: usize,
    pub reference: String,
    pub pairs: usize,
    pub rejections: usize,
    pub substituted: usize,
    pub final_loss: f64,
    pub final_reward_accuracy: f64,
    pub parameter_distance_from_pretrained: f64,
    pub audit: IterationRates,
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub pairs: Vec<TruthPair>,
    pub rejections: Vec<Rejection>,
    pub stats: Vec<StepStats>,
    pub report: PhaseReport,
    pub model: ModelHandle,
}

#[derive(Clone, Debug)]
pub struct GrathOutcome {
    pub model: ModelHandle,
    pub phases: Vec<PhaseResult>,
    pub ledger: RunLedger,
}

/// The first `n` OOD questions after a seeded shuffle, in id order.
pub fn select_questions(ood: &QaDatasetSplit, n: usize, seed: u64) -> Result<Vec<QuestionItem>, PipelineError> {
    if ood.records.len() < n {
        return Err(PipelineError::PoolTooSmall {
            needed: n,
            available: ood.records.len(),
        });
    }
    let mut idx: Vec<usize> = (0..ood.records.len()).collect();
    idx.shuffle(&mut seeds::rng(seed, "ood-questions", 0));
    let mut out: Vec<QuestionItem> = idx[..n]
        .iter()
        .map(|&i| QuestionItem {
            id: ood.records[i].id.clone(),
            question: ood.records[i].question.clone(),
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn build_template(
    setting: &Setting,
    config: &PipelineConfig,
    questions: &[QuestionItem],
) -> Result<PromptTemplate, PipelineError> {
    let m = config.template.demonstrations;
    let seed = config.seeds.demonstrations;
    let t = match config.template.domain {
        DemoDomain::InDomain => PromptTemplate::from_pool(&setting.pools.in_domain_train, m, DemoDomain::InDomain, seed)?,
        DemoDomain::Ood => {
            let used: BTreeSet<&str> = questions.iter().map(|q| q.id.as_str()).collect();
            let rest = QaDatasetSplit {
                name: setting.pools.ood.name,
                records: setting
                    .pools
                    .ood
                    .records
                    .iter()
                    .filter(|r| !used.contains(r.id.as_str()))
                    .cloned()
                    .collect(),
            };
            PromptTemplate::from_pool(&rest, m, DemoDomain::Ood, seed)?
        }
    };
    Ok(t)
}

struct PhaseInput<'a> {
    phase: usize,
    pairs: Vec<TruthPair>,
    rejections: Vec<Rejection>,
    base: &'a ModelHandle,
    reference: &'a ModelHandle,
    reference_name: String,
}

struct Runner<'a> {
    setting: &'a Setting,
    pretrained: &'a ModelHandle,
    config: &'a PipelineConfig,
    out_dir: &'a Path,
    ledger: RunLedger,
}

impl Runner<'_> {
    fn phase(&mut self, input: PhaseInput) -> Result<PhaseResult, PipelineError> {
        let started = Instant::now();
        let k = input.phase;
        let vocab = self.setting.world.vocab();
        let encoded = encode_pairs(vocab, &input.pairs)?;
        let dpo = DpoConfig {
            seed: seeds::derive(self.config.seeds.dpo, "phase", k as u64),
            ..self.config.dpo.clone()
        };
        let (model, stats) = train_dpo(input.base, input.reference, vocab.bos(), &encoded, &dpo)?;
        let model = model.with_role(RoleTag::Candidate);

        let model_id = format!("phase-{}", k);
        let mut eval = evaluate(&model, &self.setting.eval_inputs(&model_id, self.config.seeds.dpo))?;
        let distances = pairwise_distances(self.pretrained, vocab, &input.pairs)?;
        eval.pair_distance_stats = Some(summarize(&distances, HISTOGRAM_BINS));
        let audit = audit_pairs(&input.pairs, &self.setting.world)?;
        let last = stats.last().expect("at least one step");
        let report = PhaseReport {
            phase: k,
            reference: input.reference_name.clone(),
            pairs: input.pairs.len(),
            rejections: input.rejections.len(),
            substituted: input.pairs.iter().filter(|p| p.correct_answer_iteration == k && k > 0).count(),
            final_loss: last.loss,
            final_reward_accuracy: last.reward_accuracy,
            parameter_distance_from_pretrained: model.parameter_distance(self.pretrained)?,
            audit: audit.overall,
            eval,
        };

        let dir = format!("phase-{}", k);
        let rel = |f: &str| format!("{}/{}", dir, f);
        let abs = |f: &str| self.out_dir.join(rel(f));
        let mut provenance = BTreeMap::new();
        provenance.insert("phase".to_string(), k.to_string());
        provenance.insert("reference".to_string(), input.reference_name.clone());
        provenance.insert("reference_policy".to_string(), self.config.reference_policy.as_str().to_string());
        provenance.insert("dpo_seed".to_string(), dpo.seed.to_string());
        save_checkpoint(&model, &abs("model.grth"), provenance)?;
        jsonl::write(&abs("pairs.jsonl"), &input.pairs)?;
        jsonl::write(&abs("rejections.jsonl"), &input.rejections)?;
        write_stats_csv(&abs("stats.csv"), &stats)?;
        let report_text = serde_json::to_string_pretty(&report).expect("report serializes");
        jsonl::write_atomic(&abs("report.json"), report_text.as_bytes())?;

        self.ledger.phases.push(PhaseRecord {
            phase: k,
            reference: input.reference_name,
            checkpoint: rel("model.grth"),
            checkpoint_sha256: sha256_file(&abs("model.grth"))?,
            pairs: rel("pairs.jsonl"),
            pairs_sha256: sha256_file(&abs("pairs.jsonl"))?,
            rejections: rel("rejections.jsonl"),
            rejections_sha256: sha256_file(&abs("rejections.jsonl"))?,
            stats: rel("stats.csv"),
            report: rel("report.json"),
            report_sha256: sha256_file(&abs("report.json"))?,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
        self.ledger.final_checkpoint = rel("model.grth");
        self.ledger.save(&self.out_dir.join(LEDGER_FILE))?;
        Ok(PhaseResult {
            pairs: input.pairs,
            rejections: input.rejections,
            stats,
            report,
            model,
        })
    }
}

fn reason_summary(rejections: &[Rejection]) -> String {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in rejections {
        *counts.entry(r.reason.to_string()).or_default() += 1;
    }
    counts
        .iter()
        .map(|(k, v)| format!("{} {}", v, k))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Iteration-0 pairs from the pretrained model: the seeded OOD question
/// selection answered under the few-shot template. Fails when fewer than
/// the configured floor parse.
pub fn generate_initial_pairs(
    pretrained: &ModelHandle,
    setting: &Setting,
    config: &PipelineConfig,
) -> Result<(GenerationOutcome, PromptTemplate), PipelineError> {
    config.validate()?;
    let world = &setting.world;
    let questions = select_questions(&setting.pools.ood, config.pair_budget, config.seeds.questions)?;
    let template = build_template(setting, config, &questions)?;
    let policy = config.sampling.policy(world);
    let generated = generate_pairs(pretrained, world.vocab(), &questions, &template, &policy, config.seeds.generate)?;
    let floor = config.min_pairs_floor();
    if generated.pairs.len() < floor {
        return Err(PipelineError::TooFewPairs {
            kept: generated.pairs.len(),
            needed: floor,
            summary: reason_summary(&generated.rejections),
        });
    }
    Ok((generated, template))
}

/// Self-truthifying followed by `iterations` rounds of refining the correct
/// answers with the latest model and training again. Adapters carry over
/// between phases. Every phase writes its checkpoint, pairs, rejections,
/// step statistics and report under `out_dir`, listed in `ledger.json`.
pub fn run_grath(
    pretrained: &ModelHandle,
    setting: &Setting,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<GrathOutcome, PipelineError> {
    let (generated, template) = generate_initial_pairs(pretrained, setting, config)?;
    let world = &setting.world;
    let vocab = world.vocab();
    let policy = config.sampling.policy(world);

    let mut runner = Runner {
        setting,
        pretrained,
        config,
        out_dir,
        ledger: RunLedger {
            iterations: config.iterations,
            reference_policy: config.reference_policy.as_str().to_string(),
            phases: Vec::new(),
            final_checkpoint: String::new(),
        },
    };
    let base = attach_adapters(pretrained, &config.adapter, config.seeds.adapter)?;
    let mut phases = vec![runner.phase(PhaseInput {
        phase: 0,
        pairs: generated.pairs,
        rejections: generated.rejections,
        base: &base,
        reference: pretrained,
        reference_name: "pretrained".into(),
    })?];

    for t in 1..=config.iterations {
        let prev = phases.last().expect("previous phase");
        let refined = refine_pairs(
            &prev.model,
            vocab,
            &prev.pairs,
            &template,
            &policy,
            seeds::derive(config.seeds.refine, "iteration", t as u64),
            t,
        )?;
        let current = prev.model.clone().with_role(RoleTag::Base);
        let (reference, reference_name) = match config.reference_policy {
            ReferencePolicy::CurrentBase => (prev.model.clone().with_role(RoleTag::Reference), format!("phase-{}", t - 1)),
            ReferencePolicy::FixedPretrained => (pretrained.clone(), "pretrained".to_string()),
        };
        let result = runner.phase(PhaseInput {
            phase: t,
            pairs: refined.pairs,
            rejections: refined.rejections,
            base: &current,
            reference: &reference,
            reference_name,
        })?;
        phases.push(result);
    }
    let model = phases.last().expect("phase").model.clone();
    Ok(GrathOutcome {
        model,
        phases,
        ledger: runner.ledger,
    })
}

/// Pair generation from the pretrained model and one DPO phase against it.
pub fn run_self_truthify(
    pretrained: &ModelHandle,
    setting: &Setting,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<GrathOutcome, PipelineError> {
    let single = PipelineConfig {
        iterations: 0,
        ..config.clone()
    };
    run_grath(pretrained, setting, &single, out_dir)
}
