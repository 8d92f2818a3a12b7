//! Stage functions shared by the one-shot run and the standalone stages.
//!
//! Each stage maps samples (plus the previous stage's artifacts, matched by
//! sample id) to its own artifacts. Samples run concurrently; outputs keep
//! dataset order. A sample whose input is missing was rejected upstream and
//! is skipped.

use crate::dataio::{Ablation, PipelineConfig, Strategy};
use crate::distill::{
    emit_training_samples, filter_chain, hop_histogram, summarize_chain, FilterOn, StageOrder,
};
use crate::pool::build_pool;
use crate::prompts;
use crate::scorer::Scorer;
use crate::search::{
    beam_search, direct_multi_evidence, gt_guided_sampling, pool_as_chain, refine_pool, Refinement,
    TraceRecord,
};
use crate::segmenter::segment_video;
use crate::types::{DistilledSample, EvidenceChain, EvidencePool, QaSample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};

pub const SEGMENTS_KIND: &str = "segments";
pub const POOLS_KIND: &str = "pools";
pub const REFINED_KIND: &str = "refined";
pub const CHAINS_KIND: &str = "chains";
pub const TRACE_KIND: &str = "trace";
pub const VERDICTS_KIND: &str = "verdicts";
pub const REJECTS_KIND: &str = "rejects";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Segment,
    Pool,
    Refine,
    Search,
    Distill,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("stage name");
        f.pad(s.as_str().unwrap_or("stage"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub sample_id: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{sample_id}: {stage} failed: {detail}")]
    Sample {
        sample_id: String,
        stage: Stage,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

/// How a chain was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainOrigin {
    BeamSearch,
    /// The refined pool taken whole.
    RefinedPool,
    DirectMultiEvidence,
    GtGuided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub sample_id: String,
    pub origin: ChainOrigin,
    pub chain: EvidenceChain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guided_failed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub sample_id: String,
    pub pass: bool,
    pub probs: Vec<f64>,
    pub hops: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_answer_idx: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub items: Vec<T>,
    pub rejects: Vec<RejectRecord>,
    /// Samples left unprocessed because of cancellation.
    pub skipped: usize,
}

impl<T> StageOutput<T> {
    pub fn interrupted(&self) -> bool {
        self.skipped > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchItem {
    pub chain: ChainRecord,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillItem {
    pub verdict: VerdictRecord,
    pub records: Vec<DistilledSample>,
}

/// Shared per-run settings.
pub struct Runner<'a> {
    pub cfg: &'a PipelineConfig,
    pub scorer: &'a dyn Scorer,
    /// Turn per-sample failures into reject records instead of aborting.
    pub keep_going: bool,
    pub cancel: Option<&'a AtomicBool>,
}

fn index<T>(items: &[T], key: impl Fn(&T) -> &str) -> HashMap<&str, &T> {
    items.iter().map(|t| (key(t), t)).collect()
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a PipelineConfig, scorer: &'a dyn Scorer) -> Self {
        Self {
            cfg,
            scorer,
            keep_going: false,
            cancel: None,
        }
    }

    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.load(Ordering::SeqCst))
    }

    /// Runs `f` on every (sample, input) pair concurrently and collects
    /// results in input order.
    fn run_each<I, T, F>(
        &self,
        stage: Stage,
        inputs: Vec<(&QaSample, I)>,
        f: F,
    ) -> Result<StageOutput<T>, PipelineError>
    where
        I: Send + Sync,
        T: Send,
        F: Fn(&QaSample, &I) -> Result<T, String> + Sync + Send,
    {
        let results: Vec<Option<Result<T, String>>> = inputs
            .par_iter()
            .map(|(sample, input)| (!self.cancelled()).then(|| f(sample, input)))
            .collect();
        let mut out = StageOutput {
            items: Vec::new(),
            rejects: Vec::new(),
            skipped: 0,
        };
        for ((sample, _), r) in inputs.iter().zip(results) {
            match r {
                None => out.skipped += 1,
                Some(Ok(t)) => out.items.push(t),
                Some(Err(detail)) if self.keep_going => {
                    log::warn!("{}: {stage}: {detail}", sample.sample_id);
                    out.rejects.push(RejectRecord {
                        sample_id: sample.sample_id.clone(),
                        stage,
                        error: detail,
                    })
                }
                Some(Err(detail)) => {
                    return Err(PipelineError::Sample {
                        sample_id: sample.sample_id.clone(),
                        stage,
                        detail,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Uncaptioned pools, one per sample.
    pub fn segment(
        &self,
        samples: &[QaSample],
    ) -> Result<StageOutput<EvidencePool>, PipelineError> {
        let levels = self.cfg.levels()?;
        let inputs = samples.iter().map(|s| (s, ())).collect();
        self.run_each(Stage::Segment, inputs, |s, _| {
            let segments =
                segment_video(&s.sample_id, &s.video, &levels).map_err(|e| e.to_string())?;
            Ok(EvidencePool {
                sample_id: s.sample_id.clone(),
                segments,
                refined: false,
                dropped: 0,
            })
        })
    }

    pub fn build_pools(
        &self,
        samples: &[QaSample],
        segments: &[EvidencePool],
    ) -> Result<StageOutput<EvidencePool>, PipelineError> {
        let by_id = index(segments, |p| &p.sample_id);
        let inputs = samples
            .iter()
            .filter_map(|s| by_id.get(s.sample_id.as_str()).map(|p| (s, *p)))
            .collect();
        self.run_each(Stage::Pool, inputs, |s, p| {
            build_pool(s, &p.segments, self.scorer, &self.cfg.pool)
                .map(|b| b.pool)
                .map_err(|e| e.to_string())
        })
    }

    pub fn refine(
        &self,
        samples: &[QaSample],
        pools: &[EvidencePool],
    ) -> Result<StageOutput<Refinement>, PipelineError> {
        let by_id = index(pools, |p| &p.sample_id);
        let inputs = samples
            .iter()
            .filter_map(|s| by_id.get(s.sample_id.as_str()).map(|p| (s, *p)))
            .collect();
        let search = self.cfg.effective_search();
        self.run_each(Stage::Refine, inputs, |s, p| {
            refine_pool(p, s, self.scorer, search.k, search.refine_attempts)
                .map_err(|e| e.to_string())
        })
    }

    /// Chains from refined pools (search strategy) or straight from the
    /// model (baseline strategies, which need no pools).
    pub fn search(
        &self,
        samples: &[QaSample],
        refined: &[Refinement],
    ) -> Result<StageOutput<SearchItem>, PipelineError> {
        match self.cfg.strategy {
            Strategy::Search => {
                let by_id = index(refined, |r| &r.pool.sample_id);
                let inputs = samples
                    .iter()
                    .filter_map(|s| by_id.get(s.sample_id.as_str()).map(|r| (s, *r)))
                    .collect();
                let cfg = self.cfg.effective_search();
                let search_off = self.cfg.ablation.search_off;
                self.run_each(Stage::Search, inputs, |s, r| {
                    if search_off {
                        let chain =
                            pool_as_chain(&r.pool, s, self.scorer).map_err(|e| e.to_string())?;
                        return Ok(SearchItem {
                            chain: ChainRecord {
                                sample_id: s.sample_id.clone(),
                                origin: ChainOrigin::RefinedPool,
                                chain,
                                round: None,
                                guided_failed: None,
                            },
                            trace: Vec::new(),
                        });
                    }
                    let out =
                        beam_search(&r.pool, s, self.scorer, &cfg).map_err(|e| e.to_string())?;
                    Ok(SearchItem {
                        chain: ChainRecord {
                            sample_id: s.sample_id.clone(),
                            origin: ChainOrigin::BeamSearch,
                            chain: out.chain,
                            round: None,
                            guided_failed: None,
                        },
                        trace: out.trace,
                    })
                })
            }
            Strategy::DirectMultiEvidence => {
                let inputs = samples.iter().map(|s| (s, ())).collect();
                self.run_each(Stage::Search, inputs, |s, _| {
                    let chain = direct_multi_evidence(s, self.scorer).map_err(|e| e.to_string())?;
                    Ok(SearchItem {
                        chain: ChainRecord {
                            sample_id: s.sample_id.clone(),
                            origin: ChainOrigin::DirectMultiEvidence,
                            chain,
                            round: None,
                            guided_failed: None,
                        },
                        trace: Vec::new(),
                    })
                })
            }
            Strategy::GtGuided => {
                let inputs = samples.iter().map(|s| (s, ())).collect();
                let rounds = self.cfg.gt_rounds;
                self.run_each(Stage::Search, inputs, |s, _| {
                    let g =
                        gt_guided_sampling(s, self.scorer, rounds).map_err(|e| e.to_string())?;
                    Ok(SearchItem {
                        chain: ChainRecord {
                            sample_id: s.sample_id.clone(),
                            origin: ChainOrigin::GtGuided,
                            chain: g.chain,
                            round: Some(g.round),
                            guided_failed: Some(g.failed),
                        },
                        trace: Vec::new(),
                    })
                })
            }
        }
    }

    /// Summarize, filter and emit, in the configured order.
    pub fn distill(
        &self,
        samples: &[QaSample],
        chains: &[ChainRecord],
    ) -> Result<StageOutput<DistillItem>, PipelineError> {
        let by_id = index(chains, |c| &c.sample_id);
        let inputs = samples
            .iter()
            .filter_map(|s| by_id.get(s.sample_id.as_str()).map(|c| (s, *c)))
            .collect();
        let dc = &self.cfg.distill;
        self.run_each(Stage::Distill, inputs, |s, c| {
            let chain = &c.chain;
            let raw_context = prompts::chain_context(chain);
            let summarize = || {
                summarize_chain(chain, s, self.scorer, dc.summarize_attempts)
                    .map_err(|e| e.to_string())
            };
            let score = |ctx: &str| filter_chain(ctx, s, self.scorer).map_err(|e| e.to_string());
            let (summary, verdict) = match dc.order {
                StageOrder::SummarizeThenFilter => {
                    let summary = summarize()?;
                    let ctx = match dc.filter_on {
                        FilterOn::Cot => summary.cot_text.as_str(),
                        FilterOn::Chain => raw_context.as_str(),
                    };
                    let verdict = score(ctx)?;
                    (Some(summary), verdict)
                }
                StageOrder::FilterThenSummarize => {
                    let verdict = score(&raw_context)?;
                    let summary = if verdict.pass || dc.override_filter {
                        Some(summarize()?)
                    } else {
                        None
                    };
                    (summary, verdict)
                }
            };
            let records = match &summary {
                Some(sm) => emit_training_samples(
                    s,
                    chain,
                    &sm.cot_text,
                    &dc.modes,
                    verdict.pass,
                    dc.override_filter,
                ),
                None => Vec::new(),
            };
            Ok(DistillItem {
                verdict: VerdictRecord {
                    sample_id: s.sample_id.clone(),
                    pass: verdict.pass,
                    probs: verdict.distribution.probs,
                    hops: chain.hops(),
                    predicted_answer_idx: summary.map(|sm| sm.predicted_answer_idx),
                },
                records,
            })
        })
    }

    /// Every stage in sequence.
    pub fn synthesize(&self, samples: &[QaSample]) -> Result<Synthesis, PipelineError> {
        let mut run = Synthesis::default();
        let needs_pool = self.cfg.strategy == Strategy::Search;
        if needs_pool {
            let seg = self.segment(samples)?;
            run.absorb(&seg);
            run.segments = seg.items;
            let pools = self.build_pools(samples, &run.segments)?;
            run.absorb(&pools);
            run.pools = pools.items;
            let refined = self.refine(samples, &run.pools)?;
            run.absorb(&refined);
            run.refined = refined.items;
        }
        let searched = self.search(samples, &run.refined)?;
        run.absorb(&searched);
        for item in searched.items {
            run.traces.extend(item.trace);
            run.chains.push(item.chain);
        }
        let distilled = self.distill(samples, &run.chains)?;
        run.absorb(&distilled);
        for item in distilled.items {
            run.verdicts.push(item.verdict);
            run.records.extend(item.records);
        }
        Ok(run)
    }
}

/// Everything a full run produces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Synthesis {
    pub segments: Vec<EvidencePool>,
    pub pools: Vec<EvidencePool>,
    pub refined: Vec<Refinement>,
    pub chains: Vec<ChainRecord>,
    pub traces: Vec<TraceRecord>,
    pub verdicts: Vec<VerdictRecord>,
    pub records: Vec<DistilledSample>,
    pub rejects: Vec<RejectRecord>,
    pub interrupted: bool,
}

impl Synthesis {
    fn absorb<T>(&mut self, out: &StageOutput<T>) {
        self.rejects.extend(out.rejects.iter().cloned());
        self.interrupted |= out.interrupted();
    }

    pub fn report(&self, samples: usize, config_hash: &str, ablation: Ablation) -> RunReport {
        RunReport::build(
            samples,
            config_hash,
            ablation,
            &self.pools,
            &self.refined,
            &self.chains,
            &self.verdicts,
            &self.records,
            &self.rejects,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub ablation: Ablation,
    pub samples: usize,
    pub pooled: usize,
    pub pool_segments: usize,
    pub dropped_segments: usize,
    pub refined: usize,
    pub refine_fallbacks: usize,
    pub chains: usize,
    pub filter_passed: usize,
    pub filter_failed: usize,
    pub filter_pass_rate: f64,
    pub records: usize,
    pub distilled_samples: usize,
    /// Hops per distinct distilled sample.
    pub hop_histogram: BTreeMap<usize, usize>,
    /// Hops of every chain, before filtering.
    pub chain_hop_histogram: BTreeMap<usize, usize>,
    pub rejects: BTreeMap<Stage, usize>,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        samples: usize,
        config_hash: &str,
        ablation: Ablation,
        pools: &[EvidencePool],
        refined: &[Refinement],
        chains: &[ChainRecord],
        verdicts: &[VerdictRecord],
        records: &[DistilledSample],
        rejects: &[RejectRecord],
    ) -> Self {
        let passed = verdicts.iter().filter(|v| v.pass).count();
        let mut chain_hops = BTreeMap::new();
        for c in chains {
            *chain_hops.entry(c.chain.hops()).or_insert(0) += 1;
        }
        let mut reject_counts = BTreeMap::new();
        for r in rejects {
            *reject_counts.entry(r.stage).or_insert(0) += 1;
        }
        let hop_histogram = hop_histogram(records);
        Self {
            config_hash: config_hash.to_string(),
            ablation,
            samples,
            pooled: pools.len(),
            pool_segments: pools.iter().map(|p| p.len()).sum(),
            dropped_segments: pools.iter().map(|p| p.dropped).sum(),
            refined: refined.len(),
            refine_fallbacks: refined.iter().filter(|r| r.fallback).count(),
            chains: chains.len(),
            filter_passed: passed,
            filter_failed: verdicts.len() - passed,
            filter_pass_rate: if verdicts.is_empty() {
                0.0
            } else {
                passed as f64 / verdicts.len() as f64
            },
            records: records.len(),
            distilled_samples: hop_histogram.values().sum(),
            hop_histogram,
            chain_hop_histogram: chain_hops,
            rejects: reject_counts,
        }
    }

    pub fn to_text(&self) -> String {
        let hist = |h: &BTreeMap<usize, usize>| {
            h.iter()
                .map(|(k, v)| format!("{k}:{v}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = String::new();
        out.push_str(&format!("config            {}\n", self.config_hash));
        out.push_str(&format!("samples           {}\n", self.samples));
        out.push_str(&format!(
            "pooled            {} ({} segments, {} dropped)\n",
            self.pooled, self.pool_segments, self.dropped_segments
        ));
        out.push_str(&format!(
            "refined           {} ({} by fallback)\n",
            self.refined, self.refine_fallbacks
        ));
        out.push_str(&format!("chains            {}\n", self.chains));
        out.push_str(&format!(
            "filter            {} passed, {} failed ({:.1}%)\n",
            self.filter_passed,
            self.filter_failed,
            self.filter_pass_rate * 100.0
        ));
        out.push_str(&format!(
            "records           {} from {} samples\n",
            self.records, self.distilled_samples
        ));
        out.push_str(&format!(
            "hops (distilled)  {}\n",
            hist(&self.hop_histogram)
        ));
        out.push_str(&format!(
            "hops (all chains) {}\n",
            hist(&self.chain_hop_histogram)
        ));
        for (stage, n) in &self.rejects {
            out.push_str(&format!("rejected at {stage:<6} {n}\n"));
        }
        out
    }
}

/// Hops of the chain a search returned, recomputed from its trace: the
/// best-scoring accepted candidate, shortest first among equal scores.
pub fn trace_hops(trace: &[TraceRecord]) -> BTreeMap<String, usize> {
    let mut best: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in trace.iter().filter(|r| r.accepted) {
        let cand = (r.score, r.seg_ids.len());
        best.entry(r.sample_id.clone())
            .and_modify(|b| {
                if cand.0 > b.0 || (cand.0 == b.0 && cand.1 < b.1) {
                    *b = cand;
                }
            })
            .or_insert(cand);
    }
    best.into_iter().map(|(k, (_, h))| (k, h)).collect()
}
