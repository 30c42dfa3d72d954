//! Rendering samples into model inputs under a prompt scheme.
//!
//! Three modes are supported:
//!
//! * `none`: bare content, GS tokens then utterances then the response.
//! * `continuous`: new indicator tokens mark the grounding source, the
//!   context and each speaker turn; they are trained like any other
//!   embedding row.
//! * `discrete`: indicators are replaced by label text from a
//!   [`DiscreteTemplate`] and the input is prefixed with a task instruction.
//!
//! For strategy-grounded samples the grounding block is the strategy token in
//! `none` and `continuous` mode, and the strategy name in `discrete` mode.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogSample, GsKind, Speaker, Task};
use crate::error::{Error, Result};
use crate::text::{self, TokenId, Tokenizer, EOS, LINE_BREAK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Instruction,
    /// Component indicators: the grounding and context block markers.
    GsIndicator,
    GsContent,
    SpeakerIndicator,
    Utterance,
    Response,
    EndToken,
    StrategyToken,
}

impl SegmentKind {
    /// Segments that carry the sample's own text.
    pub fn is_content(self) -> bool {
        matches!(
            self,
            SegmentKind::GsContent | SegmentKind::Utterance | SegmentKind::Response
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    SingleSequence,
    EncoderDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsPosition {
    PreContext,
    PostContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    None,
    Continuous,
    Discrete,
}

/// A new vocabulary token plus the text used to initialize it semantically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub token: String,
    pub explanation: String,
}

impl Indicator {
    fn new(token: &str, explanation: &str) -> Self {
        Self {
            token: token.to_string(),
            explanation: explanation.to_string(),
        }
    }
}

/// Continuous prompt tokens for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorSet {
    /// Marks the grounding block. Absent for strategy-grounded tasks.
    pub gs: Option<Indicator>,
    /// Marks the context block. Absent for strategy-grounded tasks.
    pub context: Option<Indicator>,
    pub user: Indicator,
    pub system: Indicator,
    /// One token per strategy, in inventory order.
    pub strategies: Vec<(String, Indicator)>,
}

impl IndicatorSet {
    pub fn for_task(task: Task) -> Self {
        let strategies = task
            .strategies()
            .iter()
            .map(|name| {
                let token = format!("<strategy:{}>", text::words(name).join("_"));
                (name.to_string(), Indicator::new(&token, name))
            })
            .collect();
        let (gs, context) = match task.gs_kind() {
            GsKind::Text => (
                Some(Indicator::new("<gs>", task.gs_name())),
                Some(Indicator::new("<ctx>", "conversation")),
            ),
            GsKind::Strategy => (None, None),
        };
        Self {
            gs,
            context,
            user: Indicator::new("<user>", "user"),
            system: Indicator::new("<system>", "system"),
            strategies,
        }
    }

    /// Every indicator, in the order they are appended to the vocabulary.
    pub fn all(&self) -> Vec<&Indicator> {
        let mut out: Vec<&Indicator> = self.gs.iter().chain(self.context.iter()).collect();
        out.push(&self.user);
        out.push(&self.system);
        out.extend(self.strategies.iter().map(|(_, i)| i));
        out
    }

    pub fn strategy(&self, name: &str) -> Option<&Indicator> {
        self.strategies
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, i)| i)
    }

    pub fn speaker(&self, speaker: Speaker) -> &Indicator {
        match speaker {
            Speaker::User => &self.user,
            Speaker::System => &self.system,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerLabels {
    pub user: String,
    pub system: String,
}

impl SpeakerLabels {
    pub fn get(&self, speaker: Speaker) -> &str {
        match speaker {
            Speaker::User => &self.user,
            Speaker::System => &self.system,
        }
    }
}

/// Natural-language rendering of the input structure. Pure text: it never
/// introduces vocabulary entries of its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteTemplate {
    #[serde(default)]
    pub instruction: String,
    pub gs_label: String,
    pub speaker_labels: SpeakerLabels,
    /// Placed between a label and the text it introduces.
    #[serde(default = "default_label_separator")]
    pub label_separator: String,
    /// Terminates every block, including the response.
    #[serde(default = "default_discrete_end")]
    pub end_token: String,
}

fn default_label_separator() -> String {
    ":".to_string()
}

fn default_discrete_end() -> String {
    LINE_BREAK.to_string()
}

/// The stock template for a task. The instruction wording is a
/// reconstruction; load a template file to use different text.
pub fn default_discrete_template(task: Task) -> DiscreteTemplate {
    DiscreteTemplate {
        instruction: format!(
            "The following is a conversation between a user and a system, grounded on the {}.",
            task.gs_name()
        ),
        gs_label: task.gs_name().to_string(),
        speaker_labels: SpeakerLabels {
            user: "user".to_string(),
            system: "system".to_string(),
        },
        label_separator: default_label_separator(),
        end_token: default_discrete_end(),
    }
}

impl DiscreteTemplate {
    /// Reads a TOML template file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("gs_label", &self.gs_label),
            ("speaker_labels.user", &self.speaker_labels.user),
            ("speaker_labels.system", &self.speaker_labels.system),
            ("end_token", &self.end_token),
        ] {
            if v.is_empty() {
                return Err(Error::validation("template", field, "must be non-empty"));
            }
        }
        Ok(())
    }

    /// All text the template can render, for vocabulary construction.
    pub fn texts(&self) -> Vec<String> {
        vec![
            self.instruction.clone(),
            self.gs_label.clone(),
            self.speaker_labels.user.clone(),
            self.speaker_labels.system.clone(),
            self.label_separator.clone(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    DropInstruction,
    InstructPert,
    /// Includes the `InstructPert` substitutions.
    SpeakerPert,
}

const INSTRUCTION_SUBSTITUTIONS: [(&str, &str); 3] = [
    ("The following", "Below"),
    ("conversation", "dialog"),
    ("grounded", "based"),
];

pub fn perturb_template(template: &DiscreteTemplate, kind: PerturbationKind) -> DiscreteTemplate {
    let mut out = template.clone();
    match kind {
        PerturbationKind::DropInstruction => out.instruction.clear(),
        PerturbationKind::InstructPert | PerturbationKind::SpeakerPert => {
            for (from, to) in INSTRUCTION_SUBSTITUTIONS {
                out.instruction = out.instruction.replace(from, to);
            }
            if kind == PerturbationKind::SpeakerPert {
                out.speaker_labels = SpeakerLabels {
                    user: "human".to_string(),
                    system: "AI".to_string(),
                };
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorClass {
    Component,
    Speaker,
    Both,
}

/// Everything needed to render a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptScheme {
    pub mode: PromptMode,
    /// Always present; `none` mode consults only the strategy tokens.
    pub indicators: IndicatorSet,
    pub template: Option<DiscreteTemplate>,
    pub drop_component_indicators: bool,
    pub drop_speaker_indicators: bool,
    pub gs_position: GsPosition,
}

impl PromptScheme {
    pub fn none(task: Task) -> Self {
        Self {
            mode: PromptMode::None,
            indicators: IndicatorSet::for_task(task),
            template: None,
            drop_component_indicators: false,
            drop_speaker_indicators: false,
            gs_position: GsPosition::PreContext,
        }
    }

    pub fn continuous(task: Task) -> Self {
        Self {
            mode: PromptMode::Continuous,
            ..Self::none(task)
        }
    }

    pub fn discrete(task: Task, template: DiscreteTemplate) -> Self {
        Self {
            mode: PromptMode::Discrete,
            template: Some(template),
            ..Self::none(task)
        }
    }

    pub fn with_gs_position(mut self, pos: GsPosition) -> Self {
        self.gs_position = pos;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != PromptMode::Continuous
            && (self.drop_component_indicators || self.drop_speaker_indicators)
        {
            return Err(Error::Assembly(
                "indicator ablation requires continuous mode".into(),
            ));
        }
        match (self.mode, &self.template) {
            (PromptMode::Discrete, None) => {
                Err(Error::Assembly("discrete mode needs a template".into()))
            }
            (PromptMode::Discrete, Some(t)) => t.validate(),
            _ => Ok(()),
        }
    }

    /// New tokens this scheme needs in the vocabulary. Strategy tokens are
    /// needed by every mode except discrete.
    pub fn new_tokens(&self) -> Vec<&Indicator> {
        match self.mode {
            PromptMode::Continuous => self.indicators.all(),
            PromptMode::None => self.indicators.strategies.iter().map(|(_, i)| i).collect(),
            PromptMode::Discrete => Vec::new(),
        }
    }

    pub fn end_token_text(&self) -> &str {
        match (&self.mode, &self.template) {
            (PromptMode::Discrete, Some(t)) => &t.end_token,
            _ => EOS,
        }
    }
}

/// Removes an indicator class from a continuous scheme.
pub fn ablate(scheme: &PromptScheme, drop: IndicatorClass) -> Result<PromptScheme> {
    if scheme.mode != PromptMode::Continuous {
        return Err(Error::Assembly(format!(
            "ablation needs a continuous scheme, got {:?}",
            scheme.mode
        )));
    }
    let mut out = scheme.clone();
    match drop {
        IndicatorClass::Component => out.drop_component_indicators = true,
        IndicatorClass::Speaker => out.drop_speaker_indicators = true,
        IndicatorClass::Both => {
            out.drop_component_indicators = true;
            out.drop_speaker_indicators = true;
        }
    }
    Ok(out)
}

/// A sample rendered for a model.
///
/// In the single-sequence layout `encoder` is empty and `decoder` holds the
/// whole sequence. In the encoder-decoder layout the decoder side holds only
/// the response and end token; decoding starts from `decoder_start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub layout: Layout,
    pub encoder: Vec<TokenId>,
    pub encoder_segments: Vec<SegmentKind>,
    pub decoder: Vec<TokenId>,
    pub decoder_segments: Vec<SegmentKind>,
    /// One flag per decoder token: true on response tokens and the end token.
    pub loss_mask: Vec<bool>,
    pub decoder_start: Option<TokenId>,
    pub end_token: TokenId,
}

impl AssembledInput {
    /// The single-sequence token list (the decoder side).
    pub fn tokens(&self) -> &[TokenId] {
        &self.decoder
    }

    /// Tokens consumed autoregressively: the decoder side, preceded by the
    /// start token in the encoder-decoder layout.
    pub fn stream(&self) -> Vec<TokenId> {
        self.decoder_start
            .iter()
            .copied()
            .chain(self.decoder.iter().copied())
            .collect()
    }

    /// `loss_mask` aligned with [`stream`](Self::stream).
    pub fn stream_mask(&self) -> Vec<bool> {
        self.decoder_start
            .iter()
            .map(|_| false)
            .chain(self.loss_mask.iter().copied())
            .collect()
    }

    /// Index in the stream of the first response token.
    pub fn response_start(&self) -> usize {
        self.stream_mask()
            .iter()
            .position(|&m| m)
            .unwrap_or(self.stream().len())
    }

    /// The stream up to (excluding) the response: the generation prompt.
    pub fn prompt_stream(&self) -> Vec<TokenId> {
        let mut s = self.stream();
        s.truncate(self.response_start());
        s
    }

    /// Response tokens without the end token.
    pub fn response_tokens(&self) -> Vec<TokenId> {
        self.decoder
            .iter()
            .zip(&self.decoder_segments)
            .filter(|(_, k)| **k == SegmentKind::Response)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// All (token, segment) pairs, encoder side first.
    pub fn labelled(&self) -> impl Iterator<Item = (TokenId, SegmentKind)> + '_ {
        self.encoder
            .iter()
            .copied()
            .zip(self.encoder_segments.iter().copied())
            .chain(
                self.decoder
                    .iter()
                    .copied()
                    .zip(self.decoder_segments.iter().copied()),
            )
    }

    pub fn len(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Builder<'a> {
    tok: &'a Tokenizer,
    pieces: Vec<(TokenId, SegmentKind)>,
}

impl<'a> Builder<'a> {
    fn id_of(&self, token: &str) -> Result<TokenId> {
        self.tok
            .id(token)
            .ok_or_else(|| Error::Assembly(format!("token {token:?} is not in the vocabulary")))
    }

    fn special(&mut self, token: &str, kind: SegmentKind) -> Result<()> {
        let id = self.id_of(token)?;
        self.pieces.push((id, kind));
        Ok(())
    }

    fn text(&mut self, text: &str, kind: SegmentKind) {
        for id in self.tok.encode(text) {
            self.pieces.push((id, kind));
        }
    }

    fn take(&mut self) -> Vec<(TokenId, SegmentKind)> {
        std::mem::take(&mut self.pieces)
    }
}

/// Renders a (truncated) sample under `scheme`.
pub fn assemble(
    sample: &DialogSample,
    scheme: &PromptScheme,
    layout: Layout,
    tokenizer: &Tokenizer,
) -> Result<AssembledInput> {
    scheme.validate()?;
    let mut b = Builder {
        tok: tokenizer,
        pieces: Vec::new(),
    };
    let discrete = scheme
        .template
        .as_ref()
        .filter(|_| scheme.mode == PromptMode::Discrete);
    let continuous = scheme.mode == PromptMode::Continuous;
    let component = continuous && !scheme.drop_component_indicators;
    let speaker = continuous && !scheme.drop_speaker_indicators;
    let end_text = scheme.end_token_text();
    let end_id = b.id_of(end_text)?;

    // Instruction.
    if let Some(t) = discrete {
        if !t.instruction.trim().is_empty() {
            b.text(&t.instruction, SegmentKind::Instruction);
            b.special(&t.end_token, SegmentKind::Instruction)?;
        }
    }
    let instruction = b.take();

    // Grounding block.
    match sample.gs.kind {
        GsKind::Text => {
            if let Some(t) = discrete {
                b.text(&t.gs_label, SegmentKind::GsIndicator);
                b.text(&t.label_separator, SegmentKind::GsIndicator);
            } else if component {
                if let Some(ind) = &scheme.indicators.gs {
                    b.special(&ind.token, SegmentKind::GsIndicator)?;
                }
            }
            for item in &sample.gs.items {
                b.text(item, SegmentKind::GsContent);
            }
            if let Some(t) = discrete {
                b.special(&t.end_token, SegmentKind::EndToken)?;
            }
        }
        GsKind::Strategy => {
            let name = &sample.gs.items[0];
            if let Some(t) = discrete {
                b.text(&t.gs_label, SegmentKind::GsIndicator);
                b.text(&t.label_separator, SegmentKind::GsIndicator);
                b.text(name, SegmentKind::StrategyToken);
                b.special(&t.end_token, SegmentKind::EndToken)?;
            } else {
                let ind = scheme
                    .indicators
                    .strategy(name)
                    .ok_or_else(|| Error::Assembly(format!("no strategy token for {name:?}")))?;
                b.special(&ind.token, SegmentKind::StrategyToken)?;
            }
        }
    }
    let gs_block = b.take();

    // Context block.
    if component {
        if let Some(ind) = &scheme.indicators.context {
            b.special(&ind.token, SegmentKind::GsIndicator)?;
        }
    }
    for u in &sample.context {
        if let Some(t) = discrete {
            b.text(
                t.speaker_labels.get(u.speaker),
                SegmentKind::SpeakerIndicator,
            );
            b.text(&t.label_separator, SegmentKind::SpeakerIndicator);
        } else if speaker {
            b.special(
                &scheme.indicators.speaker(u.speaker).token,
                SegmentKind::SpeakerIndicator,
            )?;
        }
        b.text(&u.text, SegmentKind::Utterance);
        if let Some(t) = discrete {
            b.special(&t.end_token, SegmentKind::EndToken)?;
        }
    }
    let context_block = b.take();

    // Response lead-in (stays on the conditioning side).
    if let Some(t) = discrete {
        b.text(&t.speaker_labels.system, SegmentKind::SpeakerIndicator);
        b.text(&t.label_separator, SegmentKind::SpeakerIndicator);
    } else if speaker {
        b.special(
            &scheme.indicators.system.token,
            SegmentKind::SpeakerIndicator,
        )?;
    }
    let lead_in = b.take();

    b.text(&sample.response, SegmentKind::Response);
    if b.pieces.is_empty() {
        return Err(Error::Assembly(format!(
            "sample {} has an empty response",
            sample.dialog_id
        )));
    }
    b.pieces.push((end_id, SegmentKind::EndToken));
    let response = b.take();

    let mut conditioning = instruction;
    match scheme.gs_position {
        GsPosition::PreContext => {
            conditioning.extend(gs_block);
            conditioning.extend(context_block);
        }
        GsPosition::PostContext => {
            conditioning.extend(context_block);
            conditioning.extend(gs_block);
        }
    }
    conditioning.extend(lead_in);

    let (encoder, decoder_start, decoder): (Vec<_>, _, Vec<_>) = match layout {
        Layout::SingleSequence => {
            if conditioning.is_empty() {
                return Err(Error::Assembly(format!(
                    "sample {} renders no tokens before the response",
                    sample.dialog_id
                )));
            }
            let mut all = conditioning;
            all.extend(response.iter().copied());
            (Vec::new(), None, all)
        }
        Layout::EncoderDecoder => (conditioning, Some(tokenizer.bor()), response.clone()),
    };
    let n_resp = response.len();
    let loss_mask = (0..decoder.len())
        .map(|i| i + n_resp >= decoder.len())
        .collect();
    Ok(AssembledInput {
        layout,
        encoder_segments: encoder.iter().map(|p| p.1).collect(),
        encoder: encoder.iter().map(|p| p.0).collect(),
        decoder_segments: decoder.iter().map(|p| p.1).collect(),
        decoder: decoder.iter().map(|p| p.0).collect(),
        loss_mask,
        decoder_start,
        end_token: end_id,
    })
}

/// Addressable scheme names, e.g. `none`, `continuous`,
/// `continuous+no_sp_ind`, `discrete+speaker_pert`, `continuous@post_gs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeName {
    pub mode: PromptMode,
    pub ablation: Option<IndicatorClass>,
    pub perturbation: Option<PerturbationKind>,
    pub gs_position: GsPosition,
}

impl SchemeName {
    /// Builds the scheme for `task`, starting from `template` (or the task's
    /// default template) in discrete mode.
    pub fn build(&self, task: Task, template: Option<&DiscreteTemplate>) -> Result<PromptScheme> {
        let mut scheme = match self.mode {
            PromptMode::None => PromptScheme::none(task),
            PromptMode::Continuous => PromptScheme::continuous(task),
            PromptMode::Discrete => {
                let base = template
                    .cloned()
                    .unwrap_or_else(|| default_discrete_template(task));
                let t = match self.perturbation {
                    Some(kind) => perturb_template(&base, kind),
                    None => base,
                };
                PromptScheme::discrete(task, t)
            }
        };
        if let Some(class) = self.ablation {
            scheme = ablate(&scheme, class)?;
        }
        Ok(scheme.with_gs_position(self.gs_position))
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.mode {
            PromptMode::None => "none",
            PromptMode::Continuous => "continuous",
            PromptMode::Discrete => "discrete",
        })?;
        if let Some(a) = self.ablation {
            f.write_str(match a {
                IndicatorClass::Component => "+no_co_ind",
                IndicatorClass::Speaker => "+no_sp_ind",
                IndicatorClass::Both => "+no_ind",
            })?;
        }
        if let Some(p) = self.perturbation {
            f.write_str(match p {
                PerturbationKind::DropInstruction => "+drop_instruction",
                PerturbationKind::InstructPert => "+instruct_pert",
                PerturbationKind::SpeakerPert => "+speaker_pert",
            })?;
        }
        if self.gs_position == GsPosition::PostContext {
            f.write_str("@post_gs")?;
        }
        Ok(())
    }
}

impl FromStr for SchemeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("scheme {s:?}: {msg}"));
        let (body, gs_position) = match s.split_once('@') {
            Some((b, "post_gs")) => (b, GsPosition::PostContext),
            Some((b, "pre_gs")) => (b, GsPosition::PreContext),
            Some((_, other)) => return Err(bad(format!("unknown position {other:?}"))),
            None => (s, GsPosition::PreContext),
        };
        let mut parts = body.split('+');
        let mode = match parts.next().unwrap_or("") {
            "none" => PromptMode::None,
            "continuous" => PromptMode::Continuous,
            "discrete" => PromptMode::Discrete,
            other => return Err(bad(format!("unknown mode {other:?}"))),
        };
        let mut name = SchemeName {
            mode,
            ablation: None,
            perturbation: None,
            gs_position,
        };
        for modifier in parts {
            match (mode, modifier) {
                (PromptMode::Continuous, "no_co_ind") => {
                    name.ablation = Some(IndicatorClass::Component)
                }
                (PromptMode::Continuous, "no_sp_ind") => {
                    name.ablation = Some(IndicatorClass::Speaker)
                }
                (PromptMode::Continuous, "no_ind") => name.ablation = Some(IndicatorClass::Both),
                (PromptMode::Discrete, "drop_instruction") => {
                    name.perturbation = Some(PerturbationKind::DropInstruction)
                }
                (PromptMode::Discrete, "instruct_pert") => {
                    name.perturbation = Some(PerturbationKind::InstructPert)
                }
                (PromptMode::Discrete, "speaker_pert") => {
                    name.perturbation = Some(PerturbationKind::SpeakerPert)
                }
                _ => {
                    return Err(bad(format!(
                        "modifier {modifier:?} does not apply to {mode:?} mode"
                    )))
                }
            }
        }
        Ok(name)
    }
}

/// Text every scheme for `task` may render, for building a vocabulary that
/// covers all templates and perturbations.
pub fn scheme_vocabulary_texts(task: Task, template: Option<&DiscreteTemplate>) -> Vec<String> {
    let base = template
        .cloned()
        .unwrap_or_else(|| default_discrete_template(task));
    let mut out = base.texts();
    for kind in [
        PerturbationKind::DropInstruction,
        PerturbationKind::InstructPert,
        PerturbationKind::SpeakerPert,
    ] {
        out.extend(perturb_template(&base, kind).texts());
    }
    for ind in IndicatorSet::for_task(task).all() {
        out.push(ind.explanation.clone());
    }
    out.extend(task.strategies().iter().map(|s| s.to_string()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GroundingSource, Utterance};

    fn wow_sample(gs: &str, ctx: &[(Speaker, &str)], resp: &str) -> DialogSample {
        DialogSample {
            dialog_id: "d".into(),
            task: Task::Wow,
            gs: GroundingSource::text([gs]),
            context: ctx
                .iter()
                .map(|(s, t)| Utterance {
                    speaker: *s,
                    text: t.to_string(),
                })
                .collect(),
            response: resp.into(),
            designated_strategy: None,
            has_reference: true,
            domain: None,
        }
    }

    fn tokenizer_for(task: Task, samples: &[&DialogSample]) -> Tokenizer {
        let mut texts: Vec<String> = scheme_vocabulary_texts(task, None);
        for s in samples {
            texts.extend(s.gs.items.iter().cloned());
            texts.extend(s.context.iter().map(|u| u.text.clone()));
            texts.push(s.response.clone());
        }
        let base = Tokenizer::build(texts.iter().map(String::as_str));
        let extra: Vec<String> = IndicatorSet::for_task(task)
            .all()
            .iter()
            .map(|i| i.token.clone())
            .collect();
        base.extended(&extra).unwrap()
    }

    fn words_of(tok: &Tokenizer, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| tok.token(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn minimal_none_rendering() {
        let mut s = wow_sample("k", &[(Speaker::User, "hi")], "hello");
        s.gs.items.clear();
        s.gs.kind = GsKind::Text;
        let tok = tokenizer_for(Task::Wow, &[&s]);
        let out = assemble(
            &s,
            &PromptScheme::none(Task::Wow),
            Layout::SingleSequence,
            &tok,
        )
        .unwrap();
        assert_eq!(words_of(&tok, &out.decoder), ["hi", "hello", EOS]);
        assert_eq!(out.loss_mask, [false, true, true]);
    }

    #[test]
    fn deleting_indicators_recovers_none_output() {
        let s = wow_sample(
            "dogs bark",
            &[(Speaker::User, "hi"), (Speaker::System, "hey")],
            "woof",
        );
        let tok = tokenizer_for(Task::Wow, &[&s]);
        let none = assemble(
            &s,
            &PromptScheme::none(Task::Wow),
            Layout::SingleSequence,
            &tok,
        )
        .unwrap();
        let cont = assemble(
            &s,
            &PromptScheme::continuous(Task::Wow),
            Layout::SingleSequence,
            &tok,
        )
        .unwrap();
        let stripped: Vec<TokenId> = cont
            .labelled()
            .filter(|(_, k)| !matches!(k, SegmentKind::GsIndicator | SegmentKind::SpeakerIndicator))
            .map(|(t, _)| t)
            .collect();
        assert_eq!(stripped, none.decoder);
        assert_eq!(
            words_of(&tok, &cont.decoder),
            [
                "<gs>", "dogs", "bark", "<ctx>", "<user>", "hi", "<system>", "hey", "<system>",
                "woof", EOS
            ]
        );
    }

    #[test]
    fn discrete_post_context_moves_gs_after_context() {
        let s = wow_sample("dogs bark", &[(Speaker::User, "hi")], "woof");
        let tok = tokenizer_for(Task::Wow, &[&s]);
        let scheme = PromptScheme::discrete(Task::Wow, default_discrete_template(Task::Wow))
            .with_gs_position(GsPosition::PostContext);
        let out = assemble(&s, &scheme, Layout::SingleSequence, &tok).unwrap();
        let w = words_of(&tok, &out.decoder);
        let tail: Vec<&str> = w[w.len() - 13..].iter().map(String::as_str).collect();
        assert_eq!(
            tail,
            [
                "user",
                ":",
                "hi",
                "\n",
                "knowledge",
                ":",
                "dogs",
                "bark",
                "\n",
                "system",
                ":",
                "woof",
                "\n"
            ]
        );
        assert_eq!(w[0], "the");
        assert_eq!(out.end_token, tok.line_break());
    }

    #[test]
    fn default_templates() {
        let wow = default_discrete_template(Task::Wow);
        for anchor in ["The following", "conversation", "grounded", "knowledge"] {
            assert!(wow.instruction.contains(anchor), "{anchor}");
        }
        assert_eq!(default_discrete_template(Task::Pc).gs_label, "persona");
        let es = default_discrete_template(Task::Esconv);
        assert_eq!(
            (
                es.speaker_labels.user.as_str(),
                es.speaker_labels.system.as_str()
            ),
            ("user", "system")
        );
        assert!(es.instruction.contains("strategy"));
        assert!("klingon".parse::<Task>().is_err());
    }

    #[test]
    fn perturbations() {
        let base = default_discrete_template(Task::Wow);
        let dropped = perturb_template(&base, PerturbationKind::DropInstruction);
        assert!(dropped.instruction.is_empty());
        assert_eq!(
            DiscreteTemplate {
                instruction: base.instruction.clone(),
                ..dropped
            },
            base
        );

        let pert = perturb_template(&base, PerturbationKind::InstructPert);
        for w in ["Below", "dialog", "based"] {
            assert!(pert.instruction.contains(w));
        }
        for w in ["The following", "conversation", "grounded"] {
            assert!(!pert.instruction.contains(w));
        }
        assert_eq!(pert.speaker_labels, base.speaker_labels);

        let sp = perturb_template(&base, PerturbationKind::SpeakerPert);
        assert_eq!(sp.instruction, pert.instruction);
        let s = wow_sample("k", &[(Speaker::User, "hi")], "yo");
        let tok = tokenizer_for(Task::Wow, &[&s]);
        let out = assemble(
            &s,
            &PromptScheme::discrete(Task::Wow, sp),
            Layout::SingleSequence,
            &tok,
        )
        .unwrap();
        let w = words_of(&tok, &out.decoder);
        let hi = w.iter().position(|x| x == "hi").unwrap();
        assert_eq!(&w[hi - 2..hi], ["human", ":"]);
    }

    #[test]
    fn ablations() {
        let s = wow_sample("dogs", &[(Speaker::User, "hi")], "woof");
        let tok = tokenizer_for(Task::Wow, &[&s]);
        let cont = PromptScheme::continuous(Task::Wow);
        let render = |sch: &PromptScheme| {
            words_of(
                &tok,
                &assemble(&s, sch, Layout::SingleSequence, &tok)
                    .unwrap()
                    .decoder,
            )
        };

        let no_co = render(&ablate(&cont, IndicatorClass::Component).unwrap());
        assert!(no_co.contains(&"<user>".to_string()) && !no_co.contains(&"<gs>".to_string()));
        let no_sp = render(&ablate(&cont, IndicatorClass::Speaker).unwrap());
        assert!(no_sp.contains(&"<gs>".to_string()) && !no_sp.contains(&"<user>".to_string()));
        assert_eq!(
            render(&ablate(&cont, IndicatorClass::Both).unwrap()),
            render(&PromptScheme::none(Task::Wow))
        );
        assert!(ablate(&PromptScheme::none(Task::Wow), IndicatorClass::Both).is_err());
    }

    #[test]
    fn strategy_grounding() {
        let s = DialogSample {
            dialog_id: "e".into(),
            task: Task::Esconv,
            gs: GroundingSource::strategy("Question"),
            context: vec![Utterance {
                speaker: Speaker::User,
                text: "i am sad".into(),
            }],
            response: "why?".into(),
            designated_strategy: Some("Question".into()),
            has_reference: true,
            domain: None,
        };
        let tok = tokenizer_for(Task::Esconv, &[&s]);
        let cont = assemble(
            &s,
            &PromptScheme::continuous(Task::Esconv),
            Layout::SingleSequence,
            &tok,
        )
        .unwrap();
        assert_eq!(
            words_of(&tok, &cont.decoder),
            [
                "<strategy:question>",
                "<user>",
                "i",
                "am",
                "sad",
                "<system>",
                "why",
                "?",
                EOS
            ]
        );
        let disc = assemble(
            &s,
            &PromptScheme::discrete(Task::Esconv, default_discrete_template(Task::Esconv)),
            Layout::SingleSequence,
            &tok,
        )
        .unwrap();
        let w = words_of(&tok, &disc.decoder);
        let at = w.iter().position(|x| x == "question").unwrap();
        assert_eq!(&w[at - 2..=at + 1], ["strategy", ":", "question", "\n"]);

        // A text sample cannot be rendered against strategy tokens it does not have.
        let mut bad = s.clone();
        bad.gs.items = vec!["Shouting".into()];
        assert!(matches!(
            assemble(
                &bad,
                &PromptScheme::continuous(Task::Esconv),
                Layout::SingleSequence,
                &tok
            ),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn encoder_decoder_split() {
        let s = wow_sample("dogs", &[(Speaker::User, "hi")], "woof woof");
        let tok = tokenizer_for(Task::Wow, &[&s]);
        let out = assemble(
            &s,
            &PromptScheme::continuous(Task::Wow),
            Layout::EncoderDecoder,
            &tok,
        )
        .unwrap();
        assert_eq!(words_of(&tok, &out.decoder), ["woof", "woof", EOS]);
        assert!(out.loss_mask.iter().all(|&m| m));
        assert_eq!(out.decoder_start, Some(tok.bor()));
        assert_eq!(out.prompt_stream(), vec![tok.bor()]);
        assert_eq!(*words_of(&tok, &out.encoder).last().unwrap(), "<system>");
    }

    #[test]
    fn scheme_names_round_trip() {
        for name in [
            "none",
            "continuous",
            "continuous+no_co_ind",
            "continuous+no_sp_ind",
            "continuous+no_ind@post_gs",
            "discrete",
            "discrete+drop_instruction",
            "discrete+instruct_pert",
            "discrete+speaker_pert",
            "continuous@post_gs",
        ] {
            let parsed: SchemeName = name.parse().unwrap();
            assert_eq!(parsed.to_string(), name);
        }
        assert!("discrete+no_ind".parse::<SchemeName>().is_err());
        assert!("prefix".parse::<SchemeName>().is_err());
        assert!("none@mid".parse::<SchemeName>().is_err());
    }

    #[test]
    fn template_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.toml");
        let t = default_discrete_template(Task::Pc);
        std::fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(DiscreteTemplate::load(&path).unwrap(), t);
        std::fs::write(
            &path,
            "gs_label = \"x\"\n[speaker_labels]\nuser = \"u\"\nsystem = \"s\"\n",
        )
        .unwrap();
        let minimal = DiscreteTemplate::load(&path).unwrap();
        assert_eq!(minimal.end_token, "\n");
        assert!(minimal.instruction.is_empty());
    }
}
