//! Deterministic synthetic workload generator.
//!
//! Prompts are grouped into intent families. Each family owns one resolved
//! intent and a fixed sentence scaffold; paraphrases swap a small number of
//! synonym slots (verb, board word, period, closer) inside that scaffold, so
//! within-family surface forms stay close while cross-family forms diverge.
//! Families draw their chart primitives from a shared pool and frequently
//! carry no filters, which makes synthesis-stage reuse common across families
//! even when intent-stage reuse is rare — the asymmetry the replay harness is
//! built to measure. A configurable fraction of prompts are near misses:
//! surface forms one entity token away from their family, carrying a
//! genuinely different intent, which is exactly the trap the entity guard
//! must catch.

use std::io::{self, BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    canonicalize_intent, parse_canonical_text, AnalyticIntent, ChartPrimitive, ChartType,
    DomainError, Filter, FilterOp, Layout, Prompt, SchemaContext, TemporalGrain,
};

pub const WORKLOAD_HEADER: &str = "sirc-workload v1";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("impossible workload spec: {0}")]
    ImpossibleSpec(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("workload parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Schema template the generator instantiates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub namespace: String,
    pub metrics: Vec<String>,
    pub dimensions: Vec<String>,
}

impl Default for SchemaSpec {
    fn default() -> Self {
        Self {
            namespace: "acme_media".into(),
            metrics: [
                "spend",
                "clicks",
                "impressions",
                "sales",
                "conversions",
                "dda_revenue",
                "ga4_revenue",
                "cpc",
                "cpm",
                "roas",
                "ctr",
                "cvr",
                "reach",
                "frequency",
            ]
            .into_iter()
            .map(str::to_string)
            .collect(),
            dimensions: [
                "channel",
                "campaign",
                "device",
                "region",
                "audience",
                "placement",
                "creative",
            ]
            .into_iter()
            .map(str::to_string)
            .collect(),
        }
    }
}

impl SchemaSpec {
    pub fn build(&self) -> Result<SchemaContext, DomainError> {
        SchemaContext::new(&self.namespace, self.metrics.clone(), self.dimensions.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub n_seed_prompts: usize,
    pub n_challenge_prompts: usize,
    pub n_intent_families: usize,
    /// Fraction of prompts that differ from their family by exactly one
    /// entity token. The count is an exact quota, not a per-prompt coin flip.
    pub near_miss_rate: f64,
    pub charts_per_intent_min: usize,
    pub charts_per_intent_max: usize,
    pub primitive_pool_size: usize,
    pub schema: SchemaSpec,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            n_seed_prompts: 500,
            n_challenge_prompts: 500,
            n_intent_families: 40,
            near_miss_rate: 0.1,
            charts_per_intent_min: 5,
            charts_per_intent_max: 14,
            primitive_pool_size: 24,
            schema: SchemaSpec::default(),
        }
    }
}

impl WorkloadSpec {
    pub fn total_prompts(&self) -> usize {
        self.n_seed_prompts + self.n_challenge_prompts
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let total = self.total_prompts();
        if total > 0 && self.n_intent_families == 0 {
            return Err(WorkloadError::ImpossibleSpec(
                "n_intent_families must be at least 1".into(),
            ));
        }
        if total > 0 && self.n_intent_families > total {
            return Err(WorkloadError::ImpossibleSpec(format!(
                "{} families cannot cover only {} prompts",
                self.n_intent_families, total
            )));
        }
        if !(0.0..=1.0).contains(&self.near_miss_rate) {
            return Err(WorkloadError::ImpossibleSpec(format!(
                "near_miss_rate must be in [0, 1], got {}",
                self.near_miss_rate
            )));
        }
        if self.charts_per_intent_min == 0 || self.charts_per_intent_min > self.charts_per_intent_max {
            return Err(WorkloadError::ImpossibleSpec(
                "charts_per_intent bounds must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.primitive_pool_size < self.charts_per_intent_max {
            return Err(WorkloadError::ImpossibleSpec(
                "primitive_pool_size must be at least charts_per_intent_max".into(),
            ));
        }
        self.schema.build()?;
        Ok(())
    }
}

/// A prompt with its ground-truth labels. The labels let the mock backend be
/// a lookup table and let tests assert entity safety without guessing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPrompt {
    pub prompt: Prompt,
    pub family_id: u32,
    pub is_near_miss: bool,
    pub true_intent: AnalyticIntent,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub schema: SchemaContext,
    pub prompts: Vec<LabeledPrompt>,
}

const VERBS: [&str; 6] = ["show", "display", "plot", "chart", "visualize", "summarize"];
const BOARDS: [&str; 6] = [
    "dashboard",
    "overview",
    "summary",
    "scorecard",
    "snapshot",
    "breakdown",
];
const PERIODS: [&str; 6] = [
    "this quarter",
    "this month",
    "the latest period",
    "recent weeks",
    "year to date",
    "the past cycle",
];
const CLOSERS: [&str; 6] = [
    "with totals",
    "with trends",
    "with benchmarks",
    "with annotations",
    "with comparisons",
    "with highlights",
];
const FILTER_VALUES: [&str; 8] = [
    "100",
    "500",
    "1000",
    "north",
    "south",
    "paid_search",
    "organic",
    "mobile",
];

#[derive(Debug, Clone, Copy)]
struct SlotChoices {
    verb: usize,
    board: usize,
    period: usize,
    closer: usize,
}

#[derive(Debug, Clone)]
struct Family {
    base_intent: AnalyticIntent,
    near_intent: AnalyticIntent,
    headline_metrics: Vec<String>,
    headline_dims: Vec<String>,
    near_headline_metrics: Vec<String>,
    near_headline_dims: Vec<String>,
    template: usize,
    base_choices: SlotChoices,
}

fn spaced(token: &str) -> String {
    token.replace('_', " ")
}

fn metric_phrase(metrics: &[String]) -> String {
    let words: Vec<String> = metrics.iter().map(|m| spaced(m)).collect();
    match words.len() {
        0 => String::new(),
        1 => words[0].clone(),
        _ => format!(
            "{} and {}",
            words[..words.len() - 1].join(", "),
            words[words.len() - 1]
        ),
    }
}

fn grain_word(grain: TemporalGrain) -> &'static str {
    match grain {
        TemporalGrain::Day => "daily",
        TemporalGrain::Week => "weekly",
        TemporalGrain::Month => "monthly",
        TemporalGrain::Quarter => "quarterly",
        TemporalGrain::None => "overall",
    }
}

fn render_prompt(
    template: usize,
    choices: SlotChoices,
    headline_metrics: &[String],
    headline_dims: &[String],
    grain: TemporalGrain,
) -> String {
    let v = VERBS[choices.verb];
    let b = BOARDS[choices.board];
    let p = PERIODS[choices.period];
    let c = CLOSERS[choices.closer];
    let m = metric_phrase(headline_metrics);
    let d = headline_dims
        .iter()
        .map(|t| spaced(t))
        .collect::<Vec<_>>()
        .join(" and ");
    let g = grain_word(grain);
    let text = match template % 4 {
        0 => format!("{v} a {b} of {m} by {d} {g} for {p} {c}"),
        1 => format!("{v} the {b} covering {m} across {d} {g} for {p} {c}"),
        2 => format!("{v} {m} by {d} in a {b} {g} for {p} {c}"),
        _ => format!("{v} a {b} tracking {m} for each {d} {g} over {p} {c}"),
    };
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => text,
    }
}

fn sample_distinct<T: Copy>(rng: &mut ChaCha8Rng, pool: &[T], n: usize) -> Vec<T> {
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let n = n.min(pool.len());
    for i in 0..n {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    indices[..n].iter().map(|&i| pool[i]).collect()
}

fn build_primitive_pool(rng: &mut ChaCha8Rng, schema: &SchemaSpec, size: usize) -> Vec<ChartPrimitive> {
    let metric_refs: Vec<&str> = schema.metrics.iter().map(String::as_str).collect();
    let dim_refs: Vec<&str> = schema.dimensions.iter().map(String::as_str).collect();
    (0..size)
        .map(|_| {
            let chart_type = ChartType::ALL[rng.random_range(0..ChartType::ALL.len())];
            let n_metrics = rng.random_range(1..=2usize);
            let metrics = sample_distinct(rng, &metric_refs, n_metrics);
            let dims = if rng.random_bool(0.7) {
                sample_distinct(rng, &dim_refs, 1)
            } else {
                Vec::new()
            };
            ChartPrimitive::new(chart_type, metrics, dims)
        })
        .collect()
}

fn swap_metric(intent: &AnalyticIntent, from: &str, to: &str) -> AnalyticIntent {
    let mut out = intent.clone();
    let swap = |tok: &mut String| {
        if tok == from {
            *tok = to.to_string();
        }
    };
    out.metrics.iter_mut().for_each(swap);
    for p in &mut out.chart_primitives {
        p.encoded_metrics.iter_mut().for_each(swap);
    }
    for f in &mut out.filters {
        if f.field == from {
            f.field = to.to_string();
        }
    }
    out
}

fn swap_dimension(intent: &AnalyticIntent, from: &str, to: &str) -> AnalyticIntent {
    let mut out = intent.clone();
    let swap = |tok: &mut String| {
        if tok == from {
            *tok = to.to_string();
        }
    };
    out.dimensions.iter_mut().for_each(swap);
    for p in &mut out.chart_primitives {
        p.encoded_dimensions.iter_mut().for_each(swap);
    }
    for f in &mut out.filters {
        if f.field == from {
            f.field = to.to_string();
        }
    }
    out
}

fn replaced(list: &[String], from: &str, to: &str) -> Vec<String> {
    list.iter()
        .map(|t| if t == from { to.to_string() } else { t.clone() })
        .collect()
}

/// Normalizes an intent to its canonical component order by round-tripping
/// through the serializer, so generated intents compare structurally equal to
/// intents read back from a workload file.
fn normalized_intent(intent: &AnalyticIntent) -> Result<AnalyticIntent, WorkloadError> {
    let canonical = canonicalize_intent(intent)?;
    Ok(parse_canonical_text(canonical.as_str())?)
}

fn build_family(
    rng: &mut ChaCha8Rng,
    spec: &WorkloadSpec,
    pool: &[ChartPrimitive],
) -> Result<Family, WorkloadError> {
    let schema = &spec.schema;
    let n_charts = rng.random_range(spec.charts_per_intent_min..=spec.charts_per_intent_max);
    let pool_refs: Vec<&ChartPrimitive> = pool.iter().collect();
    let primitives: Vec<ChartPrimitive> = sample_distinct(rng, &pool_refs, n_charts)
        .into_iter()
        .cloned()
        .collect();

    let mut metrics: Vec<String> = primitives
        .iter()
        .flat_map(|p| p.encoded_metrics.iter().cloned())
        .collect();
    metrics.sort();
    metrics.dedup();
    let mut dimensions: Vec<String> = primitives
        .iter()
        .flat_map(|p| p.encoded_dimensions.iter().cloned())
        .collect();
    dimensions.sort();
    dimensions.dedup();
    if dimensions.is_empty() {
        let dim_refs: Vec<&str> = schema.dimensions.iter().map(String::as_str).collect();
        dimensions.push(sample_distinct(rng, &dim_refs, 1)[0].to_string());
    }

    let n_filters = {
        let roll: f64 = rng.random();
        if roll < 0.6 {
            0
        } else if roll < 0.9 {
            1
        } else {
            2
        }
    };
    let mut filters = Vec::new();
    for _ in 0..n_filters {
        let all: Vec<&String> = schema.metrics.iter().chain(&schema.dimensions).collect();
        let field = all[rng.random_range(0..all.len())].clone();
        let op = FilterOp::ALL[rng.random_range(0..FilterOp::ALL.len())];
        let value = FILTER_VALUES[rng.random_range(0..FILTER_VALUES.len())];
        filters.push(Filter::new(field, op, value));
    }

    let temporal_grain = TemporalGrain::ALL[rng.random_range(0..TemporalGrain::ALL.len())];
    let layout = if rng.random_bool(0.5) {
        Some(Layout {
            rows: rng.random_range(1..=4),
            cols: rng.random_range(1..=4),
        })
    } else {
        None
    };

    let base_intent = AnalyticIntent {
        namespace: schema.namespace.clone(),
        metrics: metrics.clone(),
        dimensions: dimensions.clone(),
        filters,
        temporal_grain,
        chart_primitives: primitives,
        layout,
    };

    let metric_refs: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let n_headline = rng.random_range(2..=3usize.min(metric_refs.len()).max(2));
    let headline_metrics: Vec<String> = sample_distinct(rng, &metric_refs, n_headline)
        .into_iter()
        .map(str::to_string)
        .collect();
    let dim_refs: Vec<&str> = dimensions.iter().map(String::as_str).collect();
    let n_headline_dims = rng.random_range(1..=2usize);
    let headline_dims: Vec<String> = sample_distinct(rng, &dim_refs, n_headline_dims)
        .into_iter()
        .map(str::to_string)
        .collect();

    // The near-miss variant swaps one headline entity for a schema sibling
    // the base intent does not use. dda_revenue <-> ga4_revenue and cpc <->
    // cpm are preferred, since those are the classic traps; when every metric
    // is already taken, a headline dimension is swapped instead.
    let swap_from = headline_metrics[rng.random_range(0..headline_metrics.len())].clone();
    let preferred = match swap_from.as_str() {
        "dda_revenue" => Some("ga4_revenue"),
        "ga4_revenue" => Some("dda_revenue"),
        "cpc" => Some("cpm"),
        "cpm" => Some("cpc"),
        _ => None,
    };
    let metric_swap = preferred
        .filter(|t| !metrics.iter().any(|m| m == t))
        .map(str::to_string)
        .or_else(|| {
            schema
                .metrics
                .iter()
                .find(|m| !metrics.contains(m))
                .cloned()
        });

    let (near_intent, near_headline_metrics, near_headline_dims) = match metric_swap {
        Some(swap_to) => (
            swap_metric(&base_intent, &swap_from, &swap_to),
            replaced(&headline_metrics, &swap_from, &swap_to),
            headline_dims.clone(),
        ),
        None => {
            let dim_from = headline_dims[rng.random_range(0..headline_dims.len())].clone();
            let dim_to = schema
                .dimensions
                .iter()
                .find(|d| !dimensions.contains(d))
                .cloned()
                .ok_or_else(|| {
                    WorkloadError::ImpossibleSpec(
                        "schema has no unused metric or dimension left for near-miss construction"
                            .into(),
                    )
                })?;
            (
                swap_dimension(&base_intent, &dim_from, &dim_to),
                headline_metrics.clone(),
                replaced(&headline_dims, &dim_from, &dim_to),
            )
        }
    };

    Ok(Family {
        base_intent: normalized_intent(&base_intent)?,
        near_intent: normalized_intent(&near_intent)?,
        headline_metrics,
        headline_dims,
        near_headline_metrics,
        near_headline_dims,
        template: rng.random_range(0..4),
        base_choices: SlotChoices {
            verb: rng.random_range(0..VERBS.len()),
            board: rng.random_range(0..BOARDS.len()),
            period: rng.random_range(0..PERIODS.len()),
            closer: rng.random_range(0..CLOSERS.len()),
        },
    })
}

/// Generates the full temporally-ordered workload. Deterministic for a fixed
/// spec: the same seed always yields byte-identical prompts.
pub fn generate(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    let schema = spec.schema.build()?;
    let total = spec.total_prompts();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let pool = build_primitive_pool(&mut rng, &spec.schema, spec.primitive_pool_size);
    let mut families = Vec::with_capacity(spec.n_intent_families);
    for _ in 0..spec.n_intent_families {
        families.push(build_family(&mut rng, spec, &pool)?);
    }

    // Skewed family popularity: weight 1/(i+1).
    let weights: Vec<f64> = (0..families.len()).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let draw_family = |rng: &mut ChaCha8Rng| -> usize {
        let mut roll: f64 = rng.random::<f64>() * weight_sum;
        for (i, w) in weights.iter().enumerate() {
            roll -= w;
            if roll <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    };

    // Exact near-miss quota via partial shuffle.
    let n_near = (spec.near_miss_rate * total as f64).round() as usize;
    let mut slots: Vec<usize> = (0..total).collect();
    for i in 0..n_near.min(total) {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let near_slots: std::collections::HashSet<usize> = slots[..n_near.min(total)].iter().copied().collect();

    let mut prompts = Vec::with_capacity(total);
    for arrival_index in 0..total {
        let family_id = draw_family(&mut rng);
        let family = &families[family_id];
        let is_near_miss = near_slots.contains(&arrival_index);

        let mut choices = family.base_choices;
        let roll: f64 = rng.random();
        let n_swaps = if roll < 0.5 {
            1
        } else if roll < 0.8 {
            2
        } else {
            3
        };
        let mut slot_ids = [0usize, 1, 2, 3];
        slot_ids.shuffle(&mut rng);
        // Each swap re-draws until the slot actually changes; paraphrases
        // differ from the family's base phrasing by 1-3 words, and exact
        // duplicates only arise when two prompts land on the same variant.
        let redraw = |rng: &mut ChaCha8Rng, len: usize, current: usize| loop {
            let next = rng.random_range(0..len);
            if next != current {
                return next;
            }
        };
        for &slot in slot_ids.iter().take(n_swaps) {
            match slot {
                0 => choices.verb = redraw(&mut rng, VERBS.len(), choices.verb),
                1 => choices.board = redraw(&mut rng, BOARDS.len(), choices.board),
                2 => choices.period = redraw(&mut rng, PERIODS.len(), choices.period),
                _ => choices.closer = redraw(&mut rng, CLOSERS.len(), choices.closer),
            }
        }

        let (headline_metrics, headline_dims, intent) = if is_near_miss {
            (
                &family.near_headline_metrics,
                &family.near_headline_dims,
                family.near_intent.clone(),
            )
        } else {
            (
                &family.headline_metrics,
                &family.headline_dims,
                family.base_intent.clone(),
            )
        };
        let text = render_prompt(
            family.template,
            choices,
            headline_metrics,
            headline_dims,
            intent.temporal_grain,
        );
        intent.validate_against_schema(&schema)?;
        canonicalize_intent(&intent)?;

        prompts.push(LabeledPrompt {
            prompt: Prompt::new(text, &spec.schema.namespace, arrival_index as u64)?,
            family_id: family_id as u32,
            is_near_miss,
            true_intent: intent,
        });
    }

    Ok(Workload {
        spec: spec.clone(),
        schema,
        prompts,
    })
}

/// First `n_seed` prompts by arrival index warm the cache; the rest are
/// measured. No reshuffling.
pub fn split_temporal(
    prompts: &[LabeledPrompt],
    n_seed: usize,
) -> Result<(&[LabeledPrompt], &[LabeledPrompt]), WorkloadError> {
    if n_seed > prompts.len() {
        return Err(WorkloadError::ImpossibleSpec(format!(
            "seed size {n_seed} exceeds workload size {}",
            prompts.len()
        )));
    }
    Ok(prompts.split_at(n_seed))
}

/// Writes the `sirc-workload v1` format: a header line, then one
/// tab-separated record per prompt with fields arrival_index, namespace,
/// family_id, near-miss flag, prompt text, and the base64-encoded canonical
/// intent text.
pub fn write_workload<W: Write>(prompts: &[LabeledPrompt], mut w: W) -> Result<(), WorkloadError> {
    writeln!(w, "{WORKLOAD_HEADER}")?;
    for p in prompts {
        let canonical = canonicalize_intent(&p.true_intent)?;
        debug_assert!(!p.prompt.text.contains('\t') && !p.prompt.text.contains('\n'));
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            p.prompt.arrival_index,
            p.prompt.client_namespace,
            p.family_id,
            u8::from(p.is_near_miss),
            p.prompt.text,
            B64.encode(canonical.as_str().as_bytes()),
        )?;
    }
    Ok(())
}

pub fn read_workload<R: BufRead>(r: R) -> Result<Vec<LabeledPrompt>, WorkloadError> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.ok_or(WorkloadError::Parse {
        line: 1,
        message: "empty workload file".into(),
    })?;
    if header != WORKLOAD_HEADER {
        return Err(WorkloadError::Parse {
            line: 1,
            message: format!("expected header {WORKLOAD_HEADER:?}, got {header:?}"),
        });
    }
    let mut prompts = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| WorkloadError::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", fields.len())));
        }
        let arrival_index: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad arrival index {:?}", fields[0])))?;
        let family_id: u32 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad family id {:?}", fields[2])))?;
        let is_near_miss = match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("bad near-miss flag {other:?}"))),
        };
        let canonical_bytes = B64
            .decode(fields[5])
            .map_err(|e| err(format!("bad canonical intent base64: {e}")))?;
        let canonical = String::from_utf8(canonical_bytes)
            .map_err(|_| err("canonical intent is not utf-8".into()))?;
        let true_intent =
            parse_canonical_text(&canonical).map_err(|e| err(format!("bad canonical intent: {e}")))?;
        prompts.push(LabeledPrompt {
            prompt: Prompt::new(fields[4], fields[1], arrival_index)
                .map_err(|e| err(e.to_string()))?,
            family_id,
            is_near_miss,
            true_intent,
        });
    }
    Ok(prompts)
}
