//! Synthetic scenario-NLI benchmark.
//!
//! Premises are `agent verb object`. Hypotheses come from five templates:
//!
//! | template              | example                          | label |
//! |-----------------------|----------------------------------|-------|
//! | premise + location    | `people play ball outside`       | from the scenario |
//! | premise + detail      | `people play ball happily`       | neutral |
//! | generalization        | `someone play ball`, `people play` | entailment |
//! | negation / conflict   | `people never play ball`, `people sleep` | contradiction |
//!
//! Location hypotheses are the ambiguous ones: the grid's centre cell holds
//! an outdoor class (sky, tree, grass) or an indoor class (wall, ceiling,
//! lamp), and only that decides entailment versus contradiction. They are
//! always generated as twins that differ only in the centre cell, so each
//! ambiguous text pair occurs equally often with both labels.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::scenario::{Cell, ScenarioGrid, COLORS, OBJECT_CLASSES};

pub const ENTAILMENT: usize = 0;
pub const NEUTRAL: usize = 1;
pub const CONTRADICTION: usize = 2;
pub const LABEL_NAMES: [&str; 3] = ["entailment", "neutral", "contradiction"];

pub const AGENTS: [&str; 12] = [
    "people", "children", "men", "women", "kids", "friends", "students", "players", "girls", "boys",
    "workers", "tourists",
];
pub const ACTIVITIES: [(&str, &str); 12] = [
    ("play", "ball"),
    ("kick", "ball"),
    ("eat", "lunch"),
    ("read", "books"),
    ("drink", "tea"),
    ("sing", "songs"),
    ("ride", "bikes"),
    ("paint", "pictures"),
    ("watch", "birds"),
    ("play", "cards"),
    ("fix", "chairs"),
    ("draw", "maps"),
];
pub const OUTDOOR_WORDS: [&str; 2] = ["outside", "outdoors"];
pub const INDOOR_WORDS: [&str; 2] = ["inside", "indoors"];
pub const DETAIL_WORDS: [&str; 6] = ["happily", "together", "today", "slowly", "quietly", "again"];
const SOMEONE: &str = "someone";
const NOBODY: &str = "nobody";
const NEVER: &str = "never";
const SLEEP: &str = "sleep";

/// Object classes that make a scene outdoor / indoor.
pub const OUTDOOR_CLASSES: [u8; 3] = [0, 1, 2];
pub const INDOOR_CLASSES: [u8; 3] = [3, 4, 5];
const DISTRACTOR_CLASSES: std::ops::Range<u8> = 6..12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioNliExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub scenario: ScenarioGrid,
    pub label: usize,
    pub ambiguous: bool,
    pub split: Split,
}

impl ScenarioNliExample {
    fn key(&self) -> (Vec<String>, Vec<String>, ScenarioGrid) {
        (self.premise.clone(), self.hypothesis.clone(), self.scenario.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub ambiguous_fraction: f64,
    /// Target proportions of entailment, neutral, contradiction.
    pub class_targets: [f64; 3],
    pub grid_size: usize,
    /// How many of the built-in agents and activities to draw from.
    pub agents: usize,
    pub activities: usize,
    /// Share of location hypotheses that assert an outdoor location.
    pub outdoor_share: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            train: 2000,
            dev: 400,
            test: 400,
            ambiguous_fraction: 0.5,
            class_targets: [1.0 / 3.0; 3],
            grid_size: crate::scenario::DEFAULT_GRID,
            agents: AGENTS.len(),
            activities: ACTIVITIES.len(),
            outdoor_share: 0.8,
            seed: 0,
        }
    }
}

/// Per-split example counts implied by a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Quota {
    twins: usize,
    entailment: usize,
    contradiction: usize,
    neutral: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config(format!(
                "ambiguous_fraction {} outside [0, 1]",
                self.ambiguous_fraction
            )));
        }
        let sum: f64 = self.class_targets.iter().sum();
        if self.class_targets.iter().any(|&t| t < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class targets {:?} must be non-negative and sum to 1",
                self.class_targets
            )));
        }
        let half = self.ambiguous_fraction / 2.0;
        for (i, name) in [(ENTAILMENT, "entailment"), (CONTRADICTION, "contradiction")] {
            if self.class_targets[i] + 1e-9 < half {
                return Err(Error::Config(format!(
                    "{name} target {} is below half the ambiguous fraction {}",
                    self.class_targets[i], self.ambiguous_fraction
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.outdoor_share) {
            return Err(Error::Config(format!("outdoor_share {} outside [0, 1]", self.outdoor_share)));
        }
        if self.grid_size == 0 || self.grid_size * self.grid_size < 2 {
            return Err(Error::Config(format!("grid size {} too small", self.grid_size)));
        }
        if !(1..=AGENTS.len()).contains(&self.agents) || !(1..=ACTIVITIES.len()).contains(&self.activities) {
            return Err(Error::Config(format!(
                "agents must be in 1..={} and activities in 1..={}",
                AGENTS.len(),
                ACTIVITIES.len()
            )));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    fn quota(&self, n: usize) -> Result<Quota> {
        let twins = (self.ambiguous_fraction * n as f64 / 2.0).round() as usize;
        let amb = 2 * twins;
        let ent = (self.class_targets[ENTAILMENT] * n as f64).round() as usize;
        let con = (self.class_targets[CONTRADICTION] * n as f64).round() as usize;
        if ent < twins || con < twins || amb > n {
            return Err(Error::Config(format!(
                "class targets infeasible for {n} examples with {amb} ambiguous"
            )));
        }
        let (e, c) = (ent - twins, con - twins);
        let neutral = n
            .checked_sub(amb + e + c)
            .ok_or_else(|| Error::Config(format!("class targets infeasible for {n} examples")))?;
        Ok(Quota {
            twins,
            entailment: e,
            contradiction: c,
            neutral,
        })
    }

    /// Parses a flat `key = value` file. `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = GeneratorConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value; shared by config files and flags.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "train" => self.train = num(key, value)?,
            "dev" => self.dev = num(key, value)?,
            "test" => self.test = num(key, value)?,
            "ambiguous_fraction" => self.ambiguous_fraction = num(key, value)?,
            "target_entailment" => self.class_targets[ENTAILMENT] = num(key, value)?,
            "target_neutral" => self.class_targets[NEUTRAL] = num(key, value)?,
            "target_contradiction" => self.class_targets[CONTRADICTION] = num(key, value)?,
            "grid_size" => self.grid_size = num(key, value)?,
            "agents" => self.agents = num(key, value)?,
            "activities" => self.activities = num(key, value)?,
            "outdoor_share" => self.outdoor_share = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(format!("unknown generator key {key:?}")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "train = {}\ndev = {}\ntest = {}\nambiguous_fraction = {}\ntarget_entailment = {}\n\
             target_neutral = {}\ntarget_contradiction = {}\ngrid_size = {}\nagents = {}\n\
             activities = {}\noutdoor_share = {}\nseed = {}\n",
            self.train,
            self.dev,
            self.test,
            self.ambiguous_fraction,
            self.class_targets[ENTAILMENT],
            self.class_targets[NEUTRAL],
            self.class_targets[CONTRADICTION],
            self.grid_size,
            self.agents,
            self.activities,
            self.outdoor_share,
            self.seed
        )
    }
}

/// Index of the cell that carries the scene's location.
pub fn location_cell(grid_size: usize) -> usize {
    grid_size * grid_size / 2
}

fn words(s: &[&str]) -> Vec<String> {
    s.iter().map(|w| w.to_string()).collect()
}

/// Re-derives `(label, ambiguous)` from the rule table. Errors when the pair
/// fits no template or the scene has no recognizable location.
pub fn derive_label(premise: &[String], hypothesis: &[String], grid: &ScenarioGrid) -> Result<(usize, bool)> {
    let bad = || Error::Value(format!("pair {premise:?} / {hypothesis:?} fits no template"));
    let [a, v, o] = premise else {
        return Err(bad());
    };
    let h: Vec<&str> = hypothesis.iter().map(String::as_str).collect();
    let (a, v, o) = (a.as_str(), v.as_str(), o.as_str());
    match h.as_slice() {
        [ha, hv, ho, w] if (*ha, *hv, *ho) == (a, v, o) => {
            let says_outdoor = if OUTDOOR_WORDS.contains(w) {
                true
            } else if INDOOR_WORDS.contains(w) {
                false
            } else if DETAIL_WORDS.contains(w) {
                return Ok((NEUTRAL, false));
            } else {
                return Err(bad());
            };
            let class = grid.cells()[location_cell(grid.size())].object_class;
            let is_outdoor = if OUTDOOR_CLASSES.contains(&class) {
                true
            } else if INDOOR_CLASSES.contains(&class) {
                false
            } else {
                return Err(Error::Value(format!("location cell class {class} is neither indoor nor outdoor")));
            };
            let label = if says_outdoor == is_outdoor { ENTAILMENT } else { CONTRADICTION };
            Ok((label, true))
        }
        [s, hv, ho] if *s == SOMEONE && (*hv, *ho) == (v, o) => Ok((ENTAILMENT, false)),
        [ha, hv] if (*ha, *hv) == (a, v) => Ok((ENTAILMENT, false)),
        [ha, n, hv, ho] if *n == NEVER && (*ha, *hv, *ho) == (a, v, o) => Ok((CONTRADICTION, false)),
        [s, hv, ho] if *s == NOBODY && (*hv, *ho) == (v, o) => Ok((CONTRADICTION, false)),
        [ha, s] if *ha == a && *s == SLEEP => Ok((CONTRADICTION, false)),
        _ => Err(bad()),
    }
}

/// Every token the generator can emit, in a fixed order.
pub fn lexicon() -> Vec<&'static str> {
    let mut out: Vec<&str> = Vec::new();
    let mut push = |w: &'static str| {
        if !out.contains(&w) {
            out.push(w);
        }
    };
    AGENTS.iter().for_each(|w| push(w));
    for (v, o) in ACTIVITIES {
        push(v);
        push(o);
    }
    OUTDOOR_WORDS.iter().chain(&INDOOR_WORDS).chain(&DETAIL_WORDS).for_each(|w| push(w));
    [SOMEONE, NOBODY, NEVER, SLEEP].into_iter().for_each(push);
    out
}

pub fn build_vocabulary() -> Vocabulary {
    Vocabulary::from_words(lexicon())
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    rng: ChaCha8Rng,
    seen: HashSet<(Vec<String>, Vec<String>, ScenarioGrid)>,
}

const MAX_ATTEMPTS: usize = 10_000;

impl Generator<'_> {
    fn premise(&mut self) -> Vec<String> {
        let a = AGENTS[self.rng.random_range(0..self.cfg.agents)];
        let (v, o) = ACTIVITIES[self.rng.random_range(0..self.cfg.activities)];
        words(&[a, v, o])
    }

    fn grid(&mut self, outdoor: bool) -> ScenarioGrid {
        let g = self.cfg.grid_size;
        let centre = location_cell(g);
        let cells = (0..g * g)
            .map(|i| {
                let color = self.rng.random_range(0..COLORS.len() as u8);
                if i == centre {
                    let group = if outdoor { OUTDOOR_CLASSES } else { INDOOR_CLASSES };
                    Cell::new(group[self.rng.random_range(0..group.len())], color, true)
                } else {
                    let class = self.rng.random_range(DISTRACTOR_CLASSES);
                    Cell::new(class, color, self.rng.random_bool(0.8))
                }
            })
            .collect();
        ScenarioGrid::new(g, cells).expect("generator grid is well-formed")
    }

    fn with_centre(grid: &ScenarioGrid, class: u8) -> ScenarioGrid {
        let mut cells = grid.cells().to_vec();
        cells[location_cell(grid.size())].object_class = class;
        ScenarioGrid::new(grid.size(), cells).expect("same extents")
    }

    fn hypothesis(&mut self, premise: &[String], label: usize) -> Vec<String> {
        let (a, v, o) = (premise[0].as_str(), premise[1].as_str(), premise[2].as_str());
        match label {
            ENTAILMENT => {
                if self.rng.random_bool(0.5) {
                    words(&[SOMEONE, v, o])
                } else {
                    words(&[a, v])
                }
            }
            CONTRADICTION => match self.rng.random_range(0..3) {
                0 => words(&[a, NEVER, v, o]),
                1 => words(&[NOBODY, v, o]),
                _ => words(&[a, SLEEP]),
            },
            _ => {
                let d = DETAIL_WORDS[self.rng.random_range(0..DETAIL_WORDS.len())];
                words(&[a, v, o, d])
            }
        }
    }

    fn admit(&mut self, ex: &ScenarioNliExample) -> bool {
        self.seen.insert(ex.key())
    }

    fn text_example(&mut self, label: usize, split: Split) -> Result<ScenarioNliExample> {
        for _ in 0..MAX_ATTEMPTS {
            let premise = self.premise();
            let hypothesis = self.hypothesis(&premise, label);
            let outdoor = self.rng.random_bool(0.5);
            let ex = ScenarioNliExample {
                premise,
                hypothesis,
                scenario: self.grid(outdoor),
                label,
                ambiguous: false,
                split,
            };
            if self.admit(&ex) {
                return Ok(ex);
            }
        }
        Err(Error::Config("generator space exhausted; reduce counts".into()))
    }

    /// Two examples sharing the text and distractors; one outdoor, one indoor centre.
    fn twins(&mut self, split: Split) -> Result<[ScenarioNliExample; 2]> {
        for _ in 0..MAX_ATTEMPTS {
            let premise = self.premise();
            let outdoor_word = self.rng.random_bool(self.cfg.outdoor_share);
            let pool = if outdoor_word { OUTDOOR_WORDS } else { INDOOR_WORDS };
            let w = pool[self.rng.random_range(0..pool.len())];
            let mut hypothesis = premise.clone();
            hypothesis.push(w.to_string());
            let out_grid = self.grid(true);
            let in_class = INDOOR_CLASSES[self.rng.random_range(0..INDOOR_CLASSES.len())];
            let in_grid = Self::with_centre(&out_grid, in_class);
            let make = |scenario: ScenarioGrid, outdoor: bool| ScenarioNliExample {
                premise: premise.clone(),
                hypothesis: hypothesis.clone(),
                scenario,
                label: if outdoor == outdoor_word { ENTAILMENT } else { CONTRADICTION },
                ambiguous: true,
                split,
            };
            let pair = [make(out_grid, true), make(in_grid, false)];
            if !self.seen.contains(&pair[0].key()) && !self.seen.contains(&pair[1].key()) {
                self.admit(&pair[0]);
                self.admit(&pair[1]);
                return Ok(pair);
            }
        }
        Err(Error::Config("generator space exhausted; reduce counts".into()))
    }
}

/// Generates train, dev and test examples in that order; each split is
/// shuffled with its own seeded stream.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<ScenarioNliExample>> {
    cfg.validate()?;
    let mut gen = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xDA7A])),
        seen: HashSet::new(),
    };
    let mut all = Vec::with_capacity(cfg.train + cfg.dev + cfg.test);
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let q = cfg.quota(cfg.count(split))?;
        let mut part = Vec::with_capacity(cfg.count(split));
        for _ in 0..q.twins {
            part.extend(gen.twins(split)?);
        }
        for (label, n) in [
            (ENTAILMENT, q.entailment),
            (CONTRADICTION, q.contradiction),
            (NEUTRAL, q.neutral),
        ] {
            for _ in 0..n {
                part.push(gen.text_example(label, split)?);
            }
        }
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5EED, si as u64]));
        part.shuffle(&mut shuffle);
        all.extend(part);
    }
    Ok(all)
}

pub fn split_examples(data: &[ScenarioNliExample], split: Split) -> Vec<ScenarioNliExample> {
    data.iter().filter(|e| e.split == split).cloned().collect()
}

/// Best accuracy any model blind to the scenario can reach: majority label per
/// distinct text pair, weighted by occurrences. An empty set gives 1.0.
pub fn text_only_bayes_accuracy(data: &[ScenarioNliExample]) -> f64 {
    if data.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<(&[String], &[String]), [usize; 3]> = HashMap::new();
    for e in data {
        counts.entry((&e.premise, &e.hypothesis)).or_default()[e.label] += 1;
    }
    let best: usize = counts.values().map(|c| *c.iter().max().unwrap()).sum();
    best as f64 / data.len() as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRecord {
    g: usize,
    cells: Vec<[u8; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    premise: String,
    hypothesis: String,
    grid: GridRecord,
    label: usize,
    ambiguous: bool,
    split: Split,
}

impl From<&ScenarioNliExample> for Record {
    fn from(e: &ScenarioNliExample) -> Self {
        Record {
            premise: e.premise.join(" "),
            hypothesis: e.hypothesis.join(" "),
            grid: GridRecord {
                g: e.scenario.size(),
                cells: e
                    .scenario
                    .cells()
                    .iter()
                    .map(|c| [c.object_class, c.color, c.present as u8])
                    .collect(),
            },
            label: e.label,
            ambiguous: e.ambiguous,
            split: e.split,
        }
    }
}

impl Record {
    fn into_example(self) -> std::result::Result<ScenarioNliExample, String> {
        if self.label >= 3 {
            return Err(format!("label {} out of range", self.label));
        }
        let mut cells = Vec::with_capacity(self.grid.cells.len());
        for [c, col, p] in self.grid.cells {
            if p > 1 {
                return Err(format!("presence flag {p} is not 0 or 1"));
            }
            let cell = Cell::new(c, col, p == 1);
            if !cell.is_valid() {
                return Err(format!(
                    "cell ({c}, {col}) outside {} classes x {} colors",
                    OBJECT_CLASSES.len(),
                    COLORS.len()
                ));
            }
            cells.push(cell);
        }
        let scenario = ScenarioGrid::new(self.grid.g, cells).map_err(|e| e.to_string())?;
        let split_words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        Ok(ScenarioNliExample {
            premise: split_words(&self.premise),
            hypothesis: split_words(&self.hypothesis),
            scenario,
            label: self.label,
            ambiguous: self.ambiguous,
            split: self.split,
        })
    }
}

pub fn write_jsonl<W: Write>(data: &[ScenarioNliExample], mut w: W) -> Result<()> {
    for e in data {
        let line = serde_json::to_string(&Record::from(e)).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<ScenarioNliExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(rec.into_example().map_err(parse)?);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &[ScenarioNliExample]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(data, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ScenarioNliExample>> {
    read_jsonl(BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            train: 300,
            dev: 60,
            test: 60,
            seed,
            ..Default::default()
        }
    }

    fn grid_with_centre(class: u8) -> ScenarioGrid {
        let mut cells = vec![Cell::new(7, 0, true); 9];
        cells[4] = Cell::new(class, 1, true);
        ScenarioGrid::new(3, cells).unwrap()
    }

    #[test]
    fn location_hypothesis_follows_scene() {
        let p = words(&["people", "play", "ball"]);
        let h = words(&["people", "play", "ball", "outside"]);
        assert_eq!(derive_label(&p, &h, &grid_with_centre(2)).unwrap(), (ENTAILMENT, true));
        assert_eq!(derive_label(&p, &h, &grid_with_centre(3)).unwrap(), (CONTRADICTION, true));
        let h = words(&["people", "play", "ball", "indoors"]);
        assert_eq!(derive_label(&p, &h, &grid_with_centre(5)).unwrap(), (ENTAILMENT, true));
        assert!(derive_label(&p, &h, &grid_with_centre(9)).is_err());
    }

    #[test]
    fn text_templates_ignore_scene() {
        let p = words(&["kids", "read", "books"]);
        let cases = [
            (vec!["someone", "read", "books"], ENTAILMENT),
            (vec!["kids", "read"], ENTAILMENT),
            (vec!["kids", "never", "read", "books"], CONTRADICTION),
            (vec!["nobody", "read", "books"], CONTRADICTION),
            (vec!["kids", "sleep"], CONTRADICTION),
            (vec!["kids", "read", "books", "slowly"], NEUTRAL),
        ];
        for (h, want) in cases {
            for class in [0, 4] {
                assert_eq!(derive_label(&p, &words(&h), &grid_with_centre(class)).unwrap(), (want, false));
            }
        }
        assert!(derive_label(&p, &words(&["men", "read"]), &grid_with_centre(0)).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_sound() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a, b);
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_jsonl(&a, &mut x).unwrap();
        write_jsonl(&b, &mut y).unwrap();
        assert_eq!(x, y);
        assert_ne!(a, generate_dataset(&small(4)).unwrap());
        for e in &a {
            assert_eq!(derive_label(&e.premise, &e.hypothesis, &e.scenario).unwrap(), (e.label, e.ambiguous));
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let cfg = small(5);
        let data = generate_dataset(&cfg).unwrap();
        let mut seen = HashSet::new();
        for e in &data {
            assert!(seen.insert(e.key()), "duplicate triple");
        }
        for s in Split::ALL {
            assert_eq!(split_examples(&data, s).len(), cfg.count(s));
        }
    }

    #[test]
    fn class_balance_within_two_points() {
        let cfg = GeneratorConfig::default();
        let data = generate_dataset(&cfg).unwrap();
        for s in Split::ALL {
            let part = split_examples(&data, s);
            for (c, &target) in cfg.class_targets.iter().enumerate() {
                let frac = part.iter().filter(|e| e.label == c).count() as f64 / part.len() as f64;
                assert!((frac - target).abs() <= 0.02, "{s} class {c}: {frac}");
            }
            let amb = part.iter().filter(|e| e.ambiguous).count() as f64 / part.len() as f64;
            assert!((amb - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn bayes_ceiling_values() {
        let no_amb = GeneratorConfig {
            ambiguous_fraction: 0.0,
            ..small(6)
        };
        assert_eq!(text_only_bayes_accuracy(&generate_dataset(&no_amb).unwrap()), 1.0);
        let data = generate_dataset(&GeneratorConfig::default()).unwrap();
        for s in Split::ALL {
            let acc = text_only_bayes_accuracy(&split_examples(&data, s));
            assert!((acc - 0.75).abs() <= 0.02, "{s}: {acc}");
        }
        assert_eq!(text_only_bayes_accuracy(&[]), 1.0);
    }

    #[test]
    fn bayes_counts_majority_per_pair() {
        let data = generate_dataset(&small(7)).unwrap();
        let mut twin = data.iter().find(|e| e.ambiguous).unwrap().clone();
        let mut other = twin.clone();
        twin.label = ENTAILMENT;
        other.label = CONTRADICTION;
        assert_eq!(text_only_bayes_accuracy(&[twin.clone(), other]), 0.5);
        assert_eq!(text_only_bayes_accuracy(&[twin.clone(), twin]), 1.0);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let cfg = GeneratorConfig {
            ambiguous_fraction: 0.9,
            ..Default::default()
        };
        assert!(generate_dataset(&cfg).is_err());
        let cfg = GeneratorConfig {
            class_targets: [0.5, 0.5, 0.5],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let data = generate_dataset(&GeneratorConfig {
            train: 800,
            dev: 100,
            test: 100,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(data.len(), 1000);
        let mut buf = Vec::new();
        write_jsonl(&data, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), data);

        let mut empty = Vec::new();
        write_jsonl(&[], &mut empty).unwrap();
        assert!(empty.is_empty());
        assert!(read_jsonl(empty.as_slice()).unwrap().is_empty());

        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        let broken = first.replace("\"label\":", "\"lbl\":");
        let text = format!("{first}\n{broken}\n");
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("label") || msg.contains("lbl"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn record_layout_is_flat() {
        let data = generate_dataset(&small(8)).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&data[..1], &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["ambiguous", "grid", "hypothesis", "label", "premise", "split"]);
        assert_eq!(obj["grid"]["cells"].as_array().unwrap().len(), 9);
    }

    #[test]
    fn kv_config_round_trip_and_line_errors() {
        let cfg = GeneratorConfig {
            train: 10,
            seed: 99,
            ambiguous_fraction: 0.25,
            ..Default::default()
        };
        assert_eq!(GeneratorConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let parsed = GeneratorConfig::from_kv("# comment\n\ntrain = 12 # inline\nseed=4\n").unwrap();
        assert_eq!((parsed.train, parsed.seed), (12, 4));
        match GeneratorConfig::from_kv("train = 1\nbogus = 2\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(GeneratorConfig::from_kv("train\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn vocabulary_covers_every_generated_token() {
        let vocab = build_vocabulary();
        assert!(vocab.len() <= crate::encoder::EncoderConfig::default().vocab_size);
        for e in generate_dataset(&small(9)).unwrap() {
            for w in e.premise.iter().chain(&e.hypothesis) {
                assert_ne!(vocab.id(w), crate::encoder::UNK, "{w}");
            }
        }
    }
}
