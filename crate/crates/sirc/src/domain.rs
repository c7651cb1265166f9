//! Structured pipeline artifacts and their canonical serialization.
//!
//! An [`AnalyticIntent`] is the intermediate artifact produced by intent
//! resolution and consumed by visualization synthesis. Intents are cache keys,
//! so their serialization must be stable: [`canonicalize_intent`] sorts every
//! token list, normalizes whitespace, and emits the line-oriented canonical
//! text format (v1) described in the book under *File Formats*. Two intents
//! that are equal up to list order canonicalize to identical text and
//! therefore hash to identical digests.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::store::Digest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("prompt text is empty after trimming")]
    EmptyPrompt,
    #[error("namespace {0:?} is not a lowercase snake_case identifier")]
    BadNamespace(String),
    #[error("token {0:?} is not a lowercase snake_case identifier")]
    BadToken(String),
    #[error("schema token {0:?} appears in both the metric and dimension sets")]
    SchemaOverlap(String),
    #[error("schema {0} set is empty")]
    SchemaEmpty(&'static str),
    #[error("intent has no metrics and no chart primitives")]
    EmptyIntent,
    #[error("chart primitive token {token:?} is not in the intent's {list} list")]
    ChartTokenNotInIntent { token: String, list: &'static str },
    #[error("intent token {0:?} is not in the originating schema")]
    TokenNotInSchema(String),
    #[error("filter value {0:?} is empty or contains a comma or control character")]
    BadFilterValue(String),
    #[error("layout must have at least one row and one column")]
    BadLayout,
    #[error("cannot parse canonical text: {0}")]
    Parse(String),
}

/// A natural-language request plus the bookkeeping the replay layer needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub client_namespace: String,
    pub arrival_index: u64,
}

impl Prompt {
    pub fn new(
        text: impl Into<String>,
        client_namespace: impl Into<String>,
        arrival_index: u64,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyPrompt);
        }
        let client_namespace = client_namespace.into();
        if !is_snake_token(&client_namespace) {
            return Err(DomainError::BadNamespace(client_namespace));
        }
        Ok(Self {
            text,
            client_namespace,
            arrival_index,
        })
    }
}

/// The schema a client's prompts are resolved against: which metric and
/// dimension tokens exist in its data model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaContext {
    metrics: BTreeSet<String>,
    dimensions: BTreeSet<String>,
    namespace: String,
}

impl SchemaContext {
    pub fn new<I, J, S, T>(namespace: impl Into<String>, metrics: I, dimensions: J) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        let namespace = namespace.into();
        if !is_snake_token(&namespace) {
            return Err(DomainError::BadNamespace(namespace));
        }
        let metrics: BTreeSet<String> = metrics.into_iter().map(Into::into).collect();
        let dimensions: BTreeSet<String> = dimensions.into_iter().map(Into::into).collect();
        if metrics.is_empty() {
            return Err(DomainError::SchemaEmpty("metric"));
        }
        if dimensions.is_empty() {
            return Err(DomainError::SchemaEmpty("dimension"));
        }
        for tok in metrics.iter().chain(dimensions.iter()) {
            if !is_snake_token(tok) {
                return Err(DomainError::BadToken(tok.clone()));
            }
        }
        if let Some(shared) = metrics.intersection(&dimensions).next() {
            return Err(DomainError::SchemaOverlap(shared.clone()));
        }
        Ok(Self {
            metrics,
            dimensions,
            namespace,
        })
    }

    pub fn metrics(&self) -> &BTreeSet<String> {
        &self.metrics
    }

    pub fn dimensions(&self) -> &BTreeSet<String> {
        &self.dimensions
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn contains(&self, token: &str) -> bool {
        self.metrics.contains(token) || self.dimensions.contains(token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemporalGrain {
    Day,
    Week,
    Month,
    Quarter,
    None,
}

impl TemporalGrain {
    pub const ALL: [TemporalGrain; 5] = [
        TemporalGrain::Day,
        TemporalGrain::Week,
        TemporalGrain::Month,
        TemporalGrain::Quarter,
        TemporalGrain::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalGrain::Day => "day",
            TemporalGrain::Week => "week",
            TemporalGrain::Month => "month",
            TemporalGrain::Quarter => "quarter",
            TemporalGrain::None => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChartType {
    Line,
    Bar,
    Pie,
    Scatter,
    Table,
    KpiCard,
}

impl ChartType {
    pub const ALL: [ChartType; 6] = [
        ChartType::Line,
        ChartType::Bar,
        ChartType::Pie,
        ChartType::Scatter,
        ChartType::Table,
        ChartType::KpiCard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChartType::Line => "line",
            ChartType::Bar => "bar",
            ChartType::Pie => "pie",
            ChartType::Scatter => "scatter",
            ChartType::Table => "table",
            ChartType::KpiCard => "kpi_card",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

/// Filter operators form a closed set so the serializer is total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterOp {
    Eq,
    Ne,
    Lt,
    Gt,
    In,
}

impl FilterOp {
    pub const ALL: [FilterOp; 5] = [
        FilterOp::Eq,
        FilterOp::Ne,
        FilterOp::Lt,
        FilterOp::Gt,
        FilterOp::In,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterOp::Eq => "=",
            FilterOp::Ne => "!=",
            FilterOp::Lt => "<",
            FilterOp::Gt => ">",
            FilterOp::In => "in",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Filter {
    pub field: String,
    pub op: FilterOp,
    pub value: String,
}

impl Filter {
    pub fn new(field: impl Into<String>, op: FilterOp, value: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            op,
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChartPrimitive {
    pub chart_type: ChartType,
    pub encoded_metrics: Vec<String>,
    pub encoded_dimensions: Vec<String>,
}

impl ChartPrimitive {
    pub fn new<I, J, S, T>(chart_type: ChartType, metrics: I, dimensions: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            chart_type,
            encoded_metrics: metrics.into_iter().map(Into::into).collect(),
            encoded_dimensions: dimensions.into_iter().map(Into::into).collect(),
        }
    }
}

/// Dashboard layout as a rows-by-columns grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Layout {
    pub rows: u32,
    pub cols: u32,
}

/// Canonical structured representation of what to compute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyticIntent {
    pub namespace: String,
    pub metrics: Vec<String>,
    pub dimensions: Vec<String>,
    pub filters: Vec<Filter>,
    pub temporal_grain: TemporalGrain,
    pub chart_primitives: Vec<ChartPrimitive>,
    pub layout: Option<Layout>,
}

impl AnalyticIntent {
    /// A minimal intent; extend the public fields afterwards.
    pub fn new(namespace: impl Into<String>) -> Self {
        Self {
            namespace: namespace.into(),
            metrics: Vec::new(),
            dimensions: Vec::new(),
            filters: Vec::new(),
            temporal_grain: TemporalGrain::None,
            chart_primitives: Vec::new(),
            layout: None,
        }
    }

    /// Projects the intent onto a single chart primitive: the metric and
    /// dimension lists shrink to the primitive's encodings while filters,
    /// grain, and namespace carry over. This is the cache key for one
    /// visualization-synthesis invocation, and it is what lets distinct
    /// dashboards that share a primitive reuse each other's synthesis.
    pub fn restrict_to_primitive(&self, primitive: &ChartPrimitive) -> AnalyticIntent {
        AnalyticIntent {
            namespace: self.namespace.clone(),
            metrics: primitive.encoded_metrics.clone(),
            dimensions: primitive.encoded_dimensions.clone(),
            filters: self.filters.clone(),
            temporal_grain: self.temporal_grain,
            chart_primitives: vec![primitive.clone()],
            layout: None,
        }
    }

    /// Checks that every metric and dimension token (including filter fields)
    /// is declared by the originating schema.
    pub fn validate_against_schema(&self, schema: &SchemaContext) -> Result<(), DomainError> {
        for m in &self.metrics {
            if !schema.metrics().contains(m) {
                return Err(DomainError::TokenNotInSchema(m.clone()));
            }
        }
        for d in &self.dimensions {
            if !schema.dimensions().contains(d) {
                return Err(DomainError::TokenNotInSchema(d.clone()));
            }
        }
        for f in &self.filters {
            if !schema.contains(&f.field) {
                return Err(DomainError::TokenNotInSchema(f.field.clone()));
            }
        }
        Ok(())
    }
}

/// Prompt and completion token counts for one generation. The total is always
/// derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub const ZERO: TokenUsage = TokenUsage {
        prompt_tokens: 0,
        completion_tokens: 0,
    };

    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

/// Synthesized rendering artifact keyed by the serialized intent it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualizationDirective {
    pub source_intent_digest: Digest,
    pub chart_spec: String,
    pub cost: TokenUsage,
}

/// Deterministic serialization of an intent (canonical text v1).
///
/// UTF-8, line-oriented `key: value` pairs with keys sorted ascending, list
/// values comma-joined, and exactly one trailing newline.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalText(String);

impl CanonicalText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn digest(&self) -> Digest {
        Digest::sha256(self.0.as_bytes())
    }
}

impl fmt::Display for CanonicalText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// True for non-empty `[a-z][a-z0-9]*(_[a-z0-9]+)*` identifiers.
pub fn is_snake_token(s: &str) -> bool {
    if s.is_empty() {
        return false;
    }
    let mut prev_underscore = true; // forbids a leading underscore
    for (i, c) in s.chars().enumerate() {
        match c {
            'a'..='z' => prev_underscore = false,
            '0'..='9' => {
                if i == 0 {
                    return false;
                }
                prev_underscore = false;
            }
            '_' => {
                if prev_underscore {
                    return false;
                }
                prev_underscore = true;
            }
            _ => return false,
        }
    }
    !prev_underscore
}

fn check_token(tok: &str) -> Result<(), DomainError> {
    if is_snake_token(tok) {
        Ok(())
    } else {
        Err(DomainError::BadToken(tok.to_string()))
    }
}

fn check_filter_value(value: &str) -> Result<(), DomainError> {
    if value.is_empty() || value.chars().any(|c| c == ',' || c.is_control()) {
        return Err(DomainError::BadFilterValue(value.to_string()));
    }
    Ok(())
}

fn sorted_deduped(tokens: &[String]) -> Result<Vec<String>, DomainError> {
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        check_token(t)?;
        out.push(t.clone());
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn primitive_text(p: &ChartPrimitive) -> String {
    format!(
        "{}({}|{})",
        p.chart_type.as_str(),
        p.encoded_metrics.join("+"),
        p.encoded_dimensions.join("+")
    )
}

/// Serializes an intent into canonical text v1.
///
/// Sorting and deduplication happen here, so two intents that differ only in
/// list order produce byte-identical text. Violated intent invariants surface
/// as [`DomainError`] values naming the offending token.
pub fn canonicalize_intent(intent: &AnalyticIntent) -> Result<CanonicalText, DomainError> {
    if !is_snake_token(&intent.namespace) {
        return Err(DomainError::BadNamespace(intent.namespace.clone()));
    }
    let metrics = sorted_deduped(&intent.metrics)?;
    let dimensions = sorted_deduped(&intent.dimensions)?;
    if metrics.is_empty() && intent.chart_primitives.is_empty() {
        return Err(DomainError::EmptyIntent);
    }

    let mut filters = Vec::with_capacity(intent.filters.len());
    for f in &intent.filters {
        check_token(&f.field)?;
        check_filter_value(&f.value)?;
        filters.push(format!("{} {} {}", f.field, f.op.as_str(), f.value));
    }
    filters.sort();
    filters.dedup();

    let mut charts = Vec::with_capacity(intent.chart_primitives.len());
    for p in &intent.chart_primitives {
        let mut norm = ChartPrimitive {
            chart_type: p.chart_type,
            encoded_metrics: sorted_deduped(&p.encoded_metrics)?,
            encoded_dimensions: sorted_deduped(&p.encoded_dimensions)?,
        };
        for m in &norm.encoded_metrics {
            if !metrics.contains(m) {
                return Err(DomainError::ChartTokenNotInIntent {
                    token: m.clone(),
                    list: "metric",
                });
            }
        }
        for d in &norm.encoded_dimensions {
            if !dimensions.contains(d) {
                return Err(DomainError::ChartTokenNotInIntent {
                    token: d.clone(),
                    list: "dimension",
                });
            }
        }
        norm.encoded_metrics.shrink_to_fit();
        charts.push(primitive_text(&norm));
    }
    charts.sort();
    charts.dedup();

    if let Some(layout) = intent.layout {
        if layout.rows == 0 || layout.cols == 0 {
            return Err(DomainError::BadLayout);
        }
    }

    let mut out = String::new();
    push_line(&mut out, "charts", &charts.join(","));
    push_line(&mut out, "dimensions", &dimensions.join(","));
    push_line(&mut out, "filters", &filters.join(","));
    push_line(&mut out, "grain", intent.temporal_grain.as_str());
    let layout = intent
        .layout
        .map(|l| format!("{}x{}", l.rows, l.cols))
        .unwrap_or_default();
    push_line(&mut out, "layout", &layout);
    push_line(&mut out, "metrics", &metrics.join(","));
    push_line(&mut out, "namespace", &intent.namespace);
    Ok(CanonicalText(out))
}

fn push_line(out: &mut String, key: &str, value: &str) {
    out.push_str(key);
    out.push(':');
    if !value.is_empty() {
        out.push(' ');
        out.push_str(value);
    }
    out.push('\n');
}

/// SHA-256 of the canonical text; the cache key for synthesized artifacts.
pub fn intent_digest(intent: &AnalyticIntent) -> Result<Digest, DomainError> {
    Ok(canonicalize_intent(intent)?.digest())
}

/// Parses canonical text v1 back into an intent.
///
/// The parser is strict: the seven keys must appear exactly once, in sorted
/// order. `canonicalize_intent(parse_canonical_text(t)?) == t` for every `t`
/// the serializer emits.
pub fn parse_canonical_text(text: &str) -> Result<AnalyticIntent, DomainError> {
    let mut lines = text.lines();
    let mut field = |key: &str| -> Result<String, DomainError> {
        let line = lines
            .next()
            .ok_or_else(|| DomainError::Parse(format!("missing {key} line")))?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(':'))
            .ok_or_else(|| DomainError::Parse(format!("expected {key} line, got {line:?}")))?;
        Ok(rest.strip_prefix(' ').unwrap_or(rest).to_string())
    };

    let charts_raw = field("charts")?;
    let dimensions_raw = field("dimensions")?;
    let filters_raw = field("filters")?;
    let grain_raw = field("grain")?;
    let layout_raw = field("layout")?;
    let metrics_raw = field("metrics")?;
    let namespace = field("namespace")?;
    if lines.next().is_some() {
        return Err(DomainError::Parse("trailing content after namespace line".into()));
    }

    let split_list = |raw: &str| -> Vec<String> {
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',').map(str::to_string).collect()
        }
    };

    let mut chart_primitives = Vec::new();
    for chunk in split_list(&charts_raw) {
        chart_primitives.push(parse_primitive(&chunk)?);
    }

    let mut filters = Vec::new();
    for chunk in split_list(&filters_raw) {
        filters.push(parse_filter(&chunk)?);
    }

    let temporal_grain = TemporalGrain::parse(&grain_raw)
        .ok_or_else(|| DomainError::Parse(format!("unknown grain {grain_raw:?}")))?;

    let layout = if layout_raw.is_empty() {
        None
    } else {
        let (rows, cols) = layout_raw
            .split_once('x')
            .ok_or_else(|| DomainError::Parse(format!("bad layout {layout_raw:?}")))?;
        let parse_dim = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| DomainError::Parse(format!("bad layout {layout_raw:?}")))
        };
        Some(Layout {
            rows: parse_dim(rows)?,
            cols: parse_dim(cols)?,
        })
    };

    Ok(AnalyticIntent {
        namespace,
        metrics: split_list(&metrics_raw),
        dimensions: split_list(&dimensions_raw),
        filters,
        temporal_grain,
        chart_primitives,
        layout,
    })
}

fn parse_primitive(chunk: &str) -> Result<ChartPrimitive, DomainError> {
    let err = || DomainError::Parse(format!("bad chart primitive {chunk:?}"));
    let (ty, rest) = chunk.split_once('(').ok_or_else(err)?;
    let body = rest.strip_suffix(')').ok_or_else(err)?;
    let (metrics, dims) = body.split_once('|').ok_or_else(err)?;
    let split = |s: &str| -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split('+').map(str::to_string).collect()
        }
    };
    Ok(ChartPrimitive {
        chart_type: ChartType::parse(ty).ok_or_else(err)?,
        encoded_metrics: split(metrics),
        encoded_dimensions: split(dims),
    })
}

fn parse_filter(chunk: &str) -> Result<Filter, DomainError> {
    let err = || DomainError::Parse(format!("bad filter {chunk:?}"));
    let (field, rest) = chunk.split_once(' ').ok_or_else(err)?;
    let (op, value) = rest.split_once(' ').ok_or_else(err)?;
    Ok(Filter {
        field: field.to_string(),
        op: FilterOp::parse(op).ok_or_else(err)?,
        value: value.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_intent() -> AnalyticIntent {
        AnalyticIntent {
            namespace: "acme_media".into(),
            metrics: vec!["spend".into(), "clicks".into()],
            dimensions: vec!["channel".into()],
            filters: vec![Filter::new("spend", FilterOp::Gt, "100")],
            temporal_grain: TemporalGrain::Week,
            chart_primitives: vec![ChartPrimitive::new(
                ChartType::Bar,
                ["clicks", "spend"],
                ["channel"],
            )],
            layout: Some(Layout { rows: 2, cols: 3 }),
        }
    }

    #[test]
    fn list_order_does_not_change_canonical_text() {
        let a = sample_intent();
        let mut b = a.clone();
        b.metrics.reverse();
        b.chart_primitives[0].encoded_metrics.reverse();
        assert_eq!(
            canonicalize_intent(&a).unwrap(),
            canonicalize_intent(&b).unwrap()
        );
        assert_eq!(intent_digest(&a).unwrap(), intent_digest(&b).unwrap());
    }

    #[test]
    fn kpi_card_intent_mentions_each_metric_once() {
        let intent = AnalyticIntent {
            namespace: "acme_media".into(),
            metrics: vec![
                "sales".into(),
                "impressions".into(),
                "clicks".into(),
                "spend".into(),
            ],
            dimensions: vec![],
            filters: vec![],
            temporal_grain: TemporalGrain::None,
            chart_primitives: vec![ChartPrimitive::new(
                ChartType::KpiCard,
                ["sales", "impressions", "clicks", "spend"],
                Vec::<String>::new(),
            )],
            layout: Some(Layout { rows: 1, cols: 4 }),
        };
        let text = canonicalize_intent(&intent).unwrap();
        for tok in ["sales", "impressions", "clicks", "spend"] {
            assert_eq!(
                text.as_str().matches(tok).count(),
                2, // once in the metrics line, once inside the kpi_card primitive
                "{tok} in {}",
                text.as_str()
            );
        }
        let metrics_line = text
            .as_str()
            .lines()
            .find(|l| l.starts_with("metrics:"))
            .unwrap();
        assert_eq!(metrics_line, "metrics: clicks,impressions,sales,spend");
    }

    #[test]
    fn filter_value_changes_the_text_and_digest() {
        let a = sample_intent();
        let mut b = a.clone();
        b.filters[0].value = "200".into();
        assert_ne!(
            canonicalize_intent(&a).unwrap(),
            canonicalize_intent(&b).unwrap()
        );
        assert_ne!(intent_digest(&a).unwrap(), intent_digest(&b).unwrap());
    }

    #[test]
    fn canonicalization_is_idempotent_through_parse() {
        let intent = sample_intent();
        let c1 = canonicalize_intent(&intent).unwrap();
        let parsed = parse_canonical_text(c1.as_str()).unwrap();
        let c2 = canonicalize_intent(&parsed).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn namespace_participates_in_canonical_text() {
        let a = sample_intent();
        let mut b = a.clone();
        b.namespace = "other_client".into();
        assert_ne!(intent_digest(&a).unwrap(), intent_digest(&b).unwrap());
    }

    #[test]
    fn empty_intent_is_rejected_by_name() {
        let intent = AnalyticIntent::new("acme_media");
        assert_eq!(
            canonicalize_intent(&intent).unwrap_err(),
            DomainError::EmptyIntent
        );
    }

    #[test]
    fn chart_token_outside_intent_is_rejected() {
        let mut intent = sample_intent();
        intent.chart_primitives[0]
            .encoded_metrics
            .push("sales".into());
        match canonicalize_intent(&intent).unwrap_err() {
            DomainError::ChartTokenNotInIntent { token, list } => {
                assert_eq!(token, "sales");
                assert_eq!(list, "metric");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn exactly_one_trailing_newline() {
        let text = canonicalize_intent(&sample_intent()).unwrap();
        assert!(text.as_str().ends_with('\n'));
        assert!(!text.as_str().ends_with("\n\n"));
        assert_eq!(text.as_str().lines().count(), 7);
    }

    #[test]
    fn schema_validation_catches_foreign_tokens() {
        let schema = SchemaContext::new("acme_media", ["spend", "clicks"], ["channel"]).unwrap();
        let intent = sample_intent();
        intent.validate_against_schema(&schema).unwrap();
        let mut bad = intent.clone();
        bad.metrics.push("revenue".into());
        assert_eq!(
            bad.validate_against_schema(&schema).unwrap_err(),
            DomainError::TokenNotInSchema("revenue".into())
        );
    }

    #[test]
    fn schema_rejects_metric_dimension_overlap() {
        let err = SchemaContext::new("acme", ["spend"], ["spend"]).unwrap_err();
        assert_eq!(err, DomainError::SchemaOverlap("spend".into()));
    }

    #[test]
    fn restriction_projects_onto_one_primitive() {
        let intent = sample_intent();
        let sub = intent.restrict_to_primitive(&intent.chart_primitives[0]);
        assert_eq!(sub.chart_primitives.len(), 1);
        assert_eq!(sub.metrics, intent.chart_primitives[0].encoded_metrics);
        assert_eq!(sub.filters, intent.filters);
        assert_eq!(sub.layout, None);
        canonicalize_intent(&sub).unwrap();
    }

    #[test]
    fn snake_token_rules() {
        for ok in ["spend", "dda_revenue", "ga4", "kpi_card", "a1_b2"] {
            assert!(is_snake_token(ok), "{ok}");
        }
        for bad in ["", "Spend", "4ga", "_x", "x_", "a__b", "a-b", "a b"] {
            assert!(!is_snake_token(bad), "{bad}");
        }
    }

    #[test]
    fn token_usage_total_is_derived() {
        let u = TokenUsage::new(150, 50);
        assert_eq!(u.total(), 200);
        assert_eq!((u + TokenUsage::new(1, 2)).total(), 203);
    }
}
