//! Synthetic grounded-dialog corpora for tests and desk-scale experiments.
//!
//! Every response copies keywords from its grounding source, while the
//! context mentions unrelated distractor keywords, so a model has to locate
//! the grounding block to answer well.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogSample, GroundingSource, Speaker, Task, Utterance, ESCONV_STRATEGIES};
use crate::seed;

const KEYWORDS: [&str; 60] = [
    "guitar", "piano", "volcano", "tiger", "castle", "river", "comet", "violin", "desert",
    "glacier", "falcon", "temple", "harbor", "meadow", "canyon", "lantern", "compass", "dragon",
    "orchid", "cactus", "trumpet", "island", "museum", "bridge", "forest", "planet", "rocket",
    "whale", "penguin", "garden", "library", "mountain", "ocean", "robot", "pyramid", "tunnel",
    "festival", "marathon", "opera", "chess", "cheese", "coffee", "tea", "bread", "honey", "lemon",
    "mango", "tomato", "pepper", "salmon", "soccer", "tennis", "hockey", "cricket", "surfing",
    "skiing", "painting", "poetry", "cinema", "ballet",
];

const ADJECTIVES: [&str; 30] = [
    "ancient",
    "bright",
    "famous",
    "huge",
    "tiny",
    "colorful",
    "popular",
    "rare",
    "quiet",
    "loud",
    "delicious",
    "elegant",
    "fast",
    "slow",
    "modern",
    "classic",
    "gentle",
    "wild",
    "strange",
    "beautiful",
    "heavy",
    "light",
    "sweet",
    "bitter",
    "warm",
    "cold",
    "complex",
    "simple",
    "useful",
    "expensive",
];

const CATEGORIES: [&str; 10] = [
    "instrument",
    "place",
    "animal",
    "food",
    "sport",
    "art",
    "machine",
    "building",
    "tradition",
    "hobby",
];

const VERBS: [&str; 12] = [
    "enjoy", "visit", "study", "admire", "collect", "watch", "play", "love", "share", "draw",
    "build", "explore",
];

/// Sample-generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub n_samples: usize,
    pub seed: u64,
    /// Prefix of every `dialog_id`.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    /// Fraction of samples flagged as not using the grounding source.
    #[serde(default)]
    pub unreferenced_rate: f64,
}

fn default_prefix() -> String {
    "syn".into()
}

impl SyntheticSpec {
    pub fn new(task: Task, n_samples: usize, seed: u64) -> Self {
        Self {
            task,
            n_samples,
            seed,
            id_prefix: default_prefix(),
            unreferenced_rate: 0.0,
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty")
}

fn distinct_keywords(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    rand::seq::index::sample(rng, KEYWORDS.len(), n)
        .into_iter()
        .map(|i| KEYWORDS[i])
        .collect()
}

fn context_turns(rng: &mut ChaCha8Rng, distractors: &[&str], closing: String) -> Vec<Utterance> {
    let openers = [
        format!("i was thinking about the {} today .", distractors[0]),
        format!("my friend talked about the {} yesterday .", distractors[0]),
        format!("have you heard of the {} ?", distractors[0]),
    ];
    let replies = [
        format!(
            "oh , the {} sounds {} .",
            distractors[1],
            pick(rng, &ADJECTIVES)
        ),
        format!("i only know a little about the {} .", distractors[1]),
    ];
    let n_turns = rng.random_range(1..=3usize);
    let mut turns = Vec::new();
    if n_turns >= 3 {
        turns.push(openers.choose(rng).expect("non-empty").clone());
    }
    if n_turns >= 2 {
        turns.push(replies.choose(rng).expect("non-empty").clone());
    }
    turns.push(closing);
    // The last turn is always the user's.
    let offset = turns.len() % 2;
    turns
        .into_iter()
        .enumerate()
        .map(|(i, text)| Utterance {
            speaker: if (i + offset) % 2 == 1 {
                Speaker::User
            } else {
                Speaker::System
            },
            text,
        })
        .collect()
}

fn wow_sample(rng: &mut ChaCha8Rng) -> (GroundingSource, Vec<Utterance>, String) {
    let kws = distinct_keywords(rng, 3);
    let (kw, adj, adj2) = (kws[0], pick(rng, &ADJECTIVES), pick(rng, &ADJECTIVES));
    let (cat, verb) = (pick(rng, &CATEGORIES), pick(rng, &VERBS));
    let gs = match rng.random_range(0..3) {
        0 => format!("the {kw} is a {adj} and {adj2} {cat} that many people {verb} ."),
        1 => format!(
            "a {kw} is known as a {adj} {cat} , and people {verb} it because it is {adj2} ."
        ),
        _ => format!("many people {verb} the {kw} , a {adj2} {cat} that is very {adj} ."),
    };
    let closing = [
        "can you tell me something interesting ?",
        "what do you know about that ?",
        "tell me more please .",
    ];
    let closing = pick(rng, &closing).to_string();
    let ctx = context_turns(rng, &kws[1..], closing);
    let response = match rng.random_range(0..2) {
        0 => format!("well , i know that the {kw} is {adj} and people {verb} it ."),
        _ => format!("sure , the {kw} is a {adj2} {cat} and many people {verb} it ."),
    };
    (GroundingSource::text([gs]), ctx, response)
}

fn pc_sample(rng: &mut ChaCha8Rng) -> (GroundingSource, Vec<Utterance>, String) {
    let kws = distinct_keywords(rng, 4);
    let adj = pick(rng, &ADJECTIVES);
    let persona = vec![
        format!("i love the {} .", kws[0]),
        format!("my favorite thing is {adj} {} .", kws[1]),
        format!("i {} every weekend .", pick(rng, &VERBS)),
    ];
    let ctx = context_turns(rng, &kws[2..], "what do you like to do ?".to_string());
    let response = match rng.random_range(0..2) {
        0 => format!("i love the {} and {adj} {} .", kws[0], kws[1]),
        _ => format!("well , i really love the {} .", kws[0]),
    };
    (GroundingSource::text(persona), ctx, response)
}

fn esconv_sample(rng: &mut ChaCha8Rng) -> (GroundingSource, Vec<Utterance>, String, String) {
    let kws = distinct_keywords(rng, 3);
    let strategy = *ESCONV_STRATEGIES.choose(rng).expect("non-empty");
    let kw = kws[0];
    let response = match strategy {
        "Question" => format!("how do you feel about the {kw} now ?"),
        "Restatement or Paraphrasing" => format!("so you mean the {kw} is hard for you ."),
        "Reflection of feelings" => format!("you seem sad about the {kw} ."),
        "Self-disclosure" => format!("i have felt the same about a {kw} before ."),
        "Affirmation and Reassurance" => format!("you can handle the {kw} , i am proud of you ."),
        "Providing Suggestions" => format!("maybe you could try to talk about the {kw} ."),
        "Information" => format!("research says the {kw} helps many people ."),
        _ => format!("okay , the {kw} then ."),
    };
    let response = format!("{response} i am here for you .");
    let ctx = context_turns(rng, &kws[1..], format!("i feel upset about the {kw} ."));
    (
        GroundingSource::strategy(strategy),
        ctx,
        response,
        strategy.to_string(),
    )
}

/// Deterministic corpus for `spec`.
pub fn generate_corpus(spec: &SyntheticSpec) -> Vec<DialogSample> {
    let mut rng = seed::rng_from(spec.seed, seed::tag_of(spec.task.as_str()));
    (0..spec.n_samples)
        .map(|i| {
            let (gs, context, response, strategy) = match spec.task {
                Task::Wow => {
                    let (g, c, r) = wow_sample(&mut rng);
                    (g, c, r, None)
                }
                Task::Pc => {
                    let (g, c, r) = pc_sample(&mut rng);
                    (g, c, r, None)
                }
                Task::Esconv => {
                    let (g, c, r, s) = esconv_sample(&mut rng);
                    (g, c, r, Some(s))
                }
            };
            let has_reference = rng.random::<f64>() >= spec.unreferenced_rate;
            DialogSample {
                dialog_id: format!("{}-{i:05}", spec.id_prefix),
                task: spec.task,
                gs,
                context,
                response,
                designated_strategy: strategy,
                has_reference,
                domain: None,
            }
        })
        .collect()
}

/// Every word the generators can emit.
pub fn vocabulary_texts() -> Vec<String> {
    let mut texts: Vec<String> = KEYWORDS
        .iter()
        .chain(&ADJECTIVES)
        .chain(&CATEGORIES)
        .chain(&VERBS)
        .map(|s| s.to_string())
        .collect();
    for task in [Task::Wow, Task::Pc, Task::Esconv] {
        for s in generate_corpus(&SyntheticSpec::new(task, 400, 0)) {
            texts.extend(s.gs.items);
            texts.extend(s.context.into_iter().map(|u| u.text));
            texts.push(s.response);
        }
    }
    texts
}
