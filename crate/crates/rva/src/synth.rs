//! Deterministic generator of grounded-dialog episodes with known
//! co-reference structure.
//!
//! Each episode has K regions with symbolic attributes (category,
//! color, size, state, position), a caption naming the first topic,
//! and T scripted rounds. Ambiguous rounds use pronoun questions whose
//! referent is only recoverable through the labeled antecedent chain;
//! skip rounds insert an interloper topic of a different category type
//! at t-1 so the true antecedent sits at an earlier round, mirroring
//! the history-skipping scenario. Answers ask attributes not yet
//! revealed in the text, so the region features are the only source of
//! the correct answer.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Rng;
use crate::text::Vocabulary;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },
}

pub const SCHEMA: &str = "rva-dialog-v1";

const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "white", "black", "brown", "purple",
];
const SIZES: [&str; 2] = ["small", "big"];
const POSITIONS: [&str; 3] = ["left", "center", "right"];

/// Category types pair a state vocabulary with twelve nouns each, so a
/// typed state question ("is it on or off") identifies the type of its
/// referent without naming it.
const TYPES: [(&str, [&str; 2], [&str; 12]); 3] = [
    (
        "electrical",
        ["on", "off"],
        [
            "lamp", "tv", "radio", "fan", "laptop", "phone", "oven", "toaster", "heater",
            "monitor", "printer", "projector",
        ],
    ),
    (
        "openable",
        ["open", "closed"],
        [
            "book", "door", "box", "window", "drawer", "cabinet", "suitcase", "jar", "gate",
            "envelope", "folder", "curtain",
        ],
    ),
    (
        "animate",
        ["awake", "asleep"],
        [
            "cat", "dog", "bird", "horse", "baby", "rabbit", "hamster", "turtle", "puppy",
            "kitten", "owl", "fox",
        ],
    ),
];

const FILLER_ANSWERS: [&str; 16] = [
    "yes", "no", "maybe", "nothing", "unknown", "none", "many", "few", "several", "two",
    "three", "four", "five", "six", "not sure", "no idea",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttrKind {
    Color,
    Size,
    Position,
    State,
}

const KINDS: [AttrKind; 4] = [AttrKind::Color, AttrKind::Size, AttrKind::Position, AttrKind::State];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Region {
    pub category: String,
    /// Index into TYPES; fixes the state vocabulary.
    pub type_index: usize,
    pub color: String,
    pub size: String,
    pub state: String,
    pub position: String,
    pub feature: Vec<f64>,
}

impl Region {
    pub fn attr(&self, kind: AttrKind) -> &str {
        match kind {
            AttrKind::Color => &self.color,
            AttrKind::Size => &self.size,
            AttrKind::Position => &self.position,
            AttrKind::State => &self.state,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct World {
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScriptedRound {
    pub question: Vec<String>,
    pub answer: String,
    /// Candidate answers; multi-word candidates are space-joined.
    pub candidates: Vec<String>,
    pub gt_index: usize,
    pub relevances: Vec<f64>,
    pub ambiguous: bool,
    /// Dialog-round index (0 = caption) of the referent's previous
    /// mention; present exactly when ambiguous.
    pub antecedent: Option<usize>,
    pub gt_region: usize,
    /// True when the antecedent is not the immediately preceding round.
    pub skip: bool,
    pub kind: AttrKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub caption: Vec<String>,
    pub world: World,
    pub rounds: Vec<ScriptedRound>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    /// Regions per episode (at most the 36 distinct categories).
    pub regions: usize,
    /// Dialog rounds per episode, at most 10.
    pub rounds: usize,
    pub ambiguity_rate: f64,
    pub skip_rate: f64,
    /// Candidate answers per round.
    pub candidates: usize,
    /// Region feature width.
    pub d_v: usize,
    /// Gaussian jitter added to region features.
    pub jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            regions: 36,
            rounds: 10,
            ambiguity_rate: 0.5,
            skip_rate: 0.2,
            candidates: 100,
            d_v: 64,
            jitter: 0.05,
        }
    }
}

fn all_categories() -> Vec<(usize, &'static str)> {
    let mut out = Vec::new();
    for (ti, (_, _, cats)) in TYPES.iter().enumerate() {
        for c in cats {
            out.push((ti, *c));
        }
    }
    out
}

fn answer_pool() -> Vec<String> {
    let mut pool: Vec<String> = Vec::new();
    pool.extend(COLORS.iter().map(|s| s.to_string()));
    for (_, states, _) in TYPES {
        pool.extend(states.iter().map(|s| s.to_string()));
    }
    pool.extend(SIZES.iter().map(|s| s.to_string()));
    pool.extend(POSITIONS.iter().map(|s| s.to_string()));
    for (_, c) in all_categories() {
        pool.push(format!("the {c}"));
        pool.push(format!("near the {c}"));
    }
    pool.extend(FILLER_ANSWERS.iter().map(|s| s.to_string()));
    pool
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ncat = all_categories().len();
        if self.regions == 0 || self.regions > ncat {
            return Err(SynthError::Config(format!(
                "regions must be in 1..={ncat} (distinct categories available), got {}",
                self.regions
            )));
        }
        if self.rounds == 0 || self.rounds > 10 {
            return Err(SynthError::Config(format!(
                "rounds must be in 1..=10, got {}",
                self.rounds
            )));
        }
        for (name, v) in [("ambiguity_rate", self.ambiguity_rate), ("skip_rate", self.skip_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        let pool = answer_pool().len();
        if self.candidates < 10 || self.candidates > pool {
            return Err(SynthError::Config(format!(
                "candidates must be in 10..={pool}, got {}",
                self.candidates
            )));
        }
        if self.d_v < 8 {
            return Err(SynthError::Config(format!("d_v must be at least 8, got {}", self.d_v)));
        }
        if self.jitter < 0.0 {
            return Err(SynthError::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Round to 9 significant digits, the dataset's serialized precision.
fn quant9(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format!("{x:.8e}").parse().unwrap()
}

/// Deterministic global encoding of one attribute value; fixed across
/// episodes so models can learn it.
fn attr_vector(kind: &str, value: &str, d_v: usize) -> Vec<f64> {
    let mut rng = Rng::new(fnv1a(&format!("rva-attr:{kind}:{value}")));
    let scale = (5.0f64).sqrt().recip();
    (0..d_v).map(|_| rng.uniform_in(-1.0, 1.0) * scale).collect()
}

fn region_feature(r: &Region, d_v: usize, jitter: f64, rng: &mut Rng) -> Vec<f64> {
    let parts = [
        attr_vector("category", &r.category, d_v),
        attr_vector("color", &r.color, d_v),
        attr_vector("size", &r.size, d_v),
        attr_vector("state", &r.state, d_v),
        attr_vector("position", &r.position, d_v),
    ];
    (0..d_v)
        .map(|i| {
            let sum: f64 = parts.iter().map(|p| p[i]).sum();
            quant9(sum + jitter * rng.normal())
        })
        .collect()
}

struct Topic {
    region: usize,
    last_round: usize,
}

pub fn generate_episode(seed: u64, config: &GenConfig) -> Result<Episode, SynthError> {
    config.validate()?;
    let skip_required = config.skip_rate > 0.0 && config.rounds >= 3;
    for attempt in 0..64 {
        let episode = generate_once(seed, attempt, config)?;
        if !skip_required || episode.rounds.iter().any(|r| r.skip) {
            return Ok(episode);
        }
    }
    Err(SynthError::Config(
        "could not place a skip round; raise rounds or skip_rate".into(),
    ))
}

fn generate_once(seed: u64, attempt: u64, config: &GenConfig) -> Result<Episode, SynthError> {
    let mut rng = Rng::new(seed ^ 0x5259_4147).derive(attempt); // per-episode stream

    // world: distinct categories guarantee injective attribute tuples
    let mut cats = all_categories();
    // Fisher-Yates
    for i in (1..cats.len()).rev() {
        cats.swap(i, rng.below(i + 1));
    }
    let mut regions = Vec::with_capacity(config.regions);
    for &(type_index, category) in cats.iter().take(config.regions) {
        let states = TYPES[type_index].1;
        let mut r = Region {
            category: category.to_string(),
            type_index,
            color: COLORS[rng.below(COLORS.len())].to_string(),
            size: SIZES[rng.below(SIZES.len())].to_string(),
            state: states[rng.below(2)].to_string(),
            position: POSITIONS[rng.below(POSITIONS.len())].to_string(),
            feature: Vec::new(),
        };
        r.feature = region_feature(&r, config.d_v, config.jitter, &mut rng);
        regions.push(r);
    }

    // caption introduces the first topic by category only, so no
    // attribute is revealed in text
    let first_topic = rng.below(config.regions);
    let caption: Vec<String> = ["a", "picture", "of", "a"]
        .iter()
        .map(|s| s.to_string())
        .chain([regions[first_topic].category.clone()])
        .collect();

    let mut asked: Vec<HashSet<AttrKind>> = vec![HashSet::new(); config.regions];
    let mut used: HashSet<usize> = HashSet::from([first_topic]);
    let mut topics: Vec<Topic> = vec![Topic { region: first_topic, last_round: 0 }];
    let mut rounds: Vec<ScriptedRound> = Vec::new();
    // pending skip referent set while emitting the interloper round
    let mut pending_skip: Option<usize> = None; // index into topics
    let mut had_skip = false;
    // ambiguity draws demoted by an exhausted topic are repaid at the
    // next feasible round, keeping the episode-level rate on target
    let mut amb_debt = 0usize;

    for t in 1..=config.rounds {
        let current = topics.len() - 1;
        let cur_region = topics[current].region;

        if let Some(referent) = pending_skip.take() {
            // the skip round itself: typed state question about the
            // pre-interloper topic
            let reg = topics[referent].region;
            let states = TYPES[regions[reg].type_index].1;
            let question: Vec<String> = ["is", "it", states[0], "or", states[1]]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let antecedent = topics[referent].last_round;
            debug_assert!(antecedent < t - 1);
            rounds.push(make_round(
                &mut rng,
                config,
                &regions,
                reg,
                AttrKind::State,
                question,
                true,
                Some(antecedent),
                true,
            )?);
            asked[reg].insert(AttrKind::State);
            let moved = Topic { region: reg, last_round: t };
            topics.push(moved);
            had_skip = true;
            continue;
        }

        let unused_other_type: Vec<usize> = (0..config.regions)
            .filter(|r| !used.contains(r) && regions[*r].type_index != regions[cur_region].type_index)
            .collect();
        let skip_feasible = t + 1 <= config.rounds
            && !asked[cur_region].contains(&AttrKind::State)
            && !unused_other_type.is_empty();
        let must_force_skip =
            config.skip_rate > 0.0 && !had_skip && t + 1 == config.rounds && skip_feasible;
        let want_skip = skip_feasible
            && (must_force_skip || (config.skip_rate > 0.0 && rng.uniform() < config.skip_rate));

        if want_skip {
            // interloper: unambiguous round about a fresh different-type
            // topic; the next round refers back over it
            let reg = unused_other_type[rng.below(unused_other_type.len())];
            let kind = pick_kind(&mut rng, &asked[reg], None);
            let question = unambiguous_question(&regions[reg], kind);
            rounds.push(make_round(
                &mut rng, config, &regions, reg, kind, question, false, None, false,
            )?);
            asked[reg].insert(kind);
            used.insert(reg);
            pending_skip = Some(current);
            topics.push(Topic { region: reg, last_round: t });
            continue;
        }

        let unasked: Vec<AttrKind> = KINDS
            .iter()
            .filter(|k| !asked[cur_region].contains(k))
            .cloned()
            .collect();
        let drew_ambiguous = rng.uniform() < config.ambiguity_rate;
        let want_ambiguous = !unasked.is_empty() && (drew_ambiguous || amb_debt > 0);
        if drew_ambiguous && unasked.is_empty() {
            amb_debt += 1;
        } else if want_ambiguous && !drew_ambiguous {
            amb_debt -= 1;
        }

        if want_ambiguous {
            let kind = unasked[rng.below(unasked.len())];
            let question = ambiguous_question(&regions[cur_region], kind);
            let antecedent = topics[current].last_round;
            rounds.push(make_round(
                &mut rng,
                config,
                &regions,
                cur_region,
                kind,
                question,
                true,
                Some(antecedent),
                antecedent != t - 1,
            )?);
            asked[cur_region].insert(kind);
            topics.push(Topic { region: cur_region, last_round: t });
        } else {
            // fresh unambiguous topic
            let unused: Vec<usize> = (0..config.regions).filter(|r| !used.contains(r)).collect();
            let (reg, shift_topic) = if unused.is_empty() {
                (cur_region, false)
            } else {
                (unused[rng.below(unused.len())], true)
            };
            let kind = pick_kind(&mut rng, &asked[reg], None);
            let question = unambiguous_question(&regions[reg], kind);
            rounds.push(make_round(
                &mut rng, config, &regions, reg, kind, question, false, None, false,
            )?);
            asked[reg].insert(kind);
            if shift_topic {
                used.insert(reg);
            }
            topics.push(Topic { region: reg, last_round: t });
        }
    }

    Ok(Episode {
        seed,
        caption,
        world: World { regions },
        rounds,
    })
}

fn pick_kind(rng: &mut Rng, asked: &HashSet<AttrKind>, must: Option<AttrKind>) -> AttrKind {
    if let Some(k) = must {
        return k;
    }
    let open: Vec<AttrKind> = KINDS.iter().filter(|k| !asked.contains(k)).cloned().collect();
    if open.is_empty() {
        KINDS[rng.below(4)]
    } else {
        open[rng.below(open.len())]
    }
}

fn unambiguous_question(region: &Region, kind: AttrKind) -> Vec<String> {
    let cat = region.category.as_str();
    let words: Vec<&str> = match kind {
        AttrKind::Color => vec!["what", "color", "is", "the", cat],
        AttrKind::Size => vec!["what", "size", "is", "the", cat],
        AttrKind::Position => vec!["where", "is", "the", cat],
        AttrKind::State => {
            let states = TYPES[region.type_index].1;
            vec!["is", "the", cat, states[0], "or", states[1]]
        }
    };
    words.into_iter().map(|s| s.to_string()).collect()
}

fn ambiguous_question(region: &Region, kind: AttrKind) -> Vec<String> {
    let words: Vec<&str> = match kind {
        AttrKind::Color => vec!["what", "color", "is", "it"],
        AttrKind::Size => vec!["what", "size", "is", "it"],
        AttrKind::Position => vec!["where", "is", "it"],
        AttrKind::State => {
            let states = TYPES[region.type_index].1;
            vec!["is", "it", states[0], "or", states[1]]
        }
    };
    words.into_iter().map(|s| s.to_string()).collect()
}

fn same_kind_values(kind: AttrKind, region: &Region) -> Vec<String> {
    let all: Vec<String> = match kind {
        AttrKind::Color => COLORS.iter().map(|s| s.to_string()).collect(),
        AttrKind::Size => SIZES.iter().map(|s| s.to_string()).collect(),
        AttrKind::Position => POSITIONS.iter().map(|s| s.to_string()).collect(),
        AttrKind::State => TYPES
            .iter()
            .flat_map(|(_, states, _)| states.iter().map(|s| s.to_string()))
            .collect(),
    };
    all.into_iter().filter(|v| v != region.attr(kind)).collect()
}

#[allow(clippy::too_many_arguments)]
fn make_round(
    rng: &mut Rng,
    config: &GenConfig,
    regions: &[Region],
    region: usize,
    kind: AttrKind,
    question: Vec<String>,
    ambiguous: bool,
    antecedent: Option<usize>,
    skip: bool,
) -> Result<ScriptedRound, SynthError> {
    let answer = regions[region].attr(kind).to_string();
    let near: Vec<String> = same_kind_values(kind, &regions[region]);

    // gt + near misses + distinct rel-0 fillers, then a deterministic
    // shuffle
    let mut cands: Vec<(String, f64)> = vec![(answer.clone(), 1.0)];
    for n in &near {
        if cands.len() < config.candidates {
            cands.push((n.clone(), 0.5));
        }
    }
    let pool = answer_pool();
    let taken: HashSet<String> = cands.iter().map(|(c, _)| c.clone()).collect();
    let mut fillers: Vec<String> = pool.into_iter().filter(|p| !taken.contains(p)).collect();
    while cands.len() < config.candidates {
        let i = rng.below(fillers.len());
        cands.push((fillers.swap_remove(i), 0.0));
    }
    for i in (1..cands.len()).rev() {
        cands.swap(i, rng.below(i + 1));
    }
    let gt_index = cands.iter().position(|(_, r)| *r == 1.0).unwrap();
    let (candidates, relevances): (Vec<String>, Vec<f64>) = cands.into_iter().unzip();

    Ok(ScriptedRound {
        question,
        answer,
        candidates,
        gt_index,
        relevances,
        ambiguous,
        antecedent,
        gt_region: region,
        skip,
        kind,
    })
}

/// Generates a dataset; episode i uses a stream derived from
/// (master seed, i).
pub fn generate_dataset(master_seed: u64, count: usize, config: &GenConfig) -> Result<Vec<Episode>, SynthError> {
    (0..count)
        .map(|i| {
            let seed = Rng::new(master_seed).derive(i as u64 ^ 0x9E3779B97F4A7C15).state().0;
            generate_episode(seed, config)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    candidates: usize,
    regions: usize,
    rounds: usize,
    d_v: usize,
    episodes: usize,
}

pub fn serialize(episodes: &[Episode], config: &GenConfig, path: &Path) -> Result<(), SynthError> {
    let mut out = String::new();
    let header = Header {
        schema: SCHEMA.to_string(),
        candidates: config.candidates,
        regions: config.regions,
        rounds: config.rounds,
        d_v: config.d_v,
        episodes: episodes.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap()).unwrap();
    for e in episodes {
        writeln!(out, "{}", serde_json::to_string(e).unwrap()).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A parsed dataset plus the generation parameters from its header.
#[derive(Debug)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub candidates: usize,
    pub regions: usize,
    pub rounds: usize,
    pub d_v: usize,
}

pub fn deserialize(path: &Path) -> Result<Dataset, SynthError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head_line = lines.next().ok_or(SynthError::BadRecord {
        index: 0,
        reason: "missing header".into(),
    })?;
    let header: Header = serde_json::from_str(head_line).map_err(|e| SynthError::BadRecord {
        index: 0,
        reason: format!("bad header: {e}"),
    })?;
    if header.schema != SCHEMA {
        return Err(SynthError::Schema {
            expected: SCHEMA.to_string(),
            found: header.schema,
        });
    }
    let mut episodes = Vec::with_capacity(header.episodes);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(line).map_err(|e| SynthError::BadRecord {
            index: i + 1,
            reason: e.to_string(),
        })?;
        episodes.push(e);
    }
    if episodes.len() != header.episodes {
        return Err(SynthError::BadRecord {
            index: episodes.len(),
            reason: format!(
                "truncated file: header promises {} episodes, found {}",
                header.episodes,
                episodes.len()
            ),
        });
    }
    Ok(Dataset {
        episodes,
        candidates: header.candidates,
        regions: header.regions,
        rounds: header.rounds,
        d_v: header.d_v,
    })
}

/// Vocabulary over every token appearing in a dataset.
pub fn dataset_vocab(episodes: &[Episode]) -> Vocabulary {
    let mut words: HashSet<String> = HashSet::new();
    for e in episodes {
        words.extend(e.caption.iter().cloned());
        for r in &e.rounds {
            words.extend(r.question.iter().cloned());
            for c in &r.candidates {
                words.extend(c.split_whitespace().map(|s| s.to_string()));
            }
        }
    }
    let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
    Vocabulary::build(refs)
}

/// Non-learned resolver: follows antecedent links symbolically and
/// reads attributes straight off the world. Proves that every
/// generated label is consistent — it must score perfectly.
pub mod resolver {
    use super::*;

    /// Region referred to by round `t` (1-based dialog round),
    /// derived from question text and antecedent links only.
    pub fn resolve_region(episode: &Episode, t: usize) -> Option<usize> {
        let round = &episode.rounds[t - 1];
        if !round.ambiguous {
            return category_region(episode, &round.question);
        }
        let mut ante = round.antecedent?;
        loop {
            if ante == 0 {
                return category_region(episode, &episode.caption);
            }
            let r = &episode.rounds[ante - 1];
            if !r.ambiguous {
                return category_region(episode, &r.question);
            }
            ante = r.antecedent?;
        }
    }

    fn category_region(episode: &Episode, words: &[String]) -> Option<usize> {
        episode
            .world
            .regions
            .iter()
            .position(|r| words.iter().any(|w| *w == r.category))
    }

    fn question_kind(question: &[String]) -> AttrKind {
        if question.iter().any(|w| w == "color") {
            AttrKind::Color
        } else if question.iter().any(|w| w == "size") {
            AttrKind::Size
        } else if question.iter().any(|w| w == "where") {
            AttrKind::Position
        } else {
            AttrKind::State
        }
    }

    /// Predicted candidate ranking for round `t`: the derived answer
    /// first, everything else in index order.
    pub fn resolve_ranking(episode: &Episode, t: usize) -> Option<Vec<usize>> {
        let round = &episode.rounds[t - 1];
        let region = resolve_region(episode, t)?;
        let kind = question_kind(&round.question);
        let answer = episode.world.regions[region].attr(kind);
        let best = round.candidates.iter().position(|c| c == answer)?;
        let mut ranking = vec![best];
        ranking.extend((0..round.candidates.len()).filter(|&i| i != best));
        Some(ranking)
    }
}
