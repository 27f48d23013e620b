//! Seeded generators for desk-scale text domains.
//!
//! Three visibly different character distributions: narrative English-like
//! prose, Rust-like source code, and terse clinical-style notes full of
//! abbreviations and numbers. Output is blank-line separated documents, the
//! same layout [`super::ingest`] reads.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthDomain {
    Prose,
    Code,
    Clinical,
}

impl SynthDomain {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "prose" => Some(Self::Prose),
            "code" => Some(Self::Code),
            "clinical" => Some(Self::Clinical),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Prose => "prose",
            Self::Code => "code",
            Self::Clinical => "clinical",
        }
    }
}

/// At least `min_bytes` of text for `domain`, deterministic in `seed`.
pub fn generate(domain: SynthDomain, min_bytes: usize, seed: u64) -> String {
    let mut r = rng::substream(seed, &format!("synth-{}", domain.name()));
    let mut out = String::with_capacity(min_bytes + 4096);
    while out.len() < min_bytes {
        match domain {
            SynthDomain::Prose => prose_document(&mut r, &mut out),
            SynthDomain::Code => code_document(&mut r, &mut out),
            SynthDomain::Clinical => clinical_document(&mut r, &mut out),
        }
        out.push_str("\n\n");
    }
    out
}

fn pick<'a, R: Rng>(r: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(r).copied().unwrap_or("")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

const NAMES: &[&str] = &[
    "Anna", "Marcus", "Elena", "Tobias", "Clara", "Henry", "Mira", "Jonah", "Lucia", "Oliver", "Greta", "Samuel",
    "Iris", "Victor", "Nora", "Felix", "Rosa", "Arthur", "Lena", "Edwin",
];
const PLACES: &[&str] = &[
    "the harbor",
    "the old mill",
    "the village square",
    "the northern hills",
    "the library",
    "the station",
    "the orchard",
    "the river bank",
    "the market",
    "the chapel",
    "the lighthouse",
    "the garden wall",
];
const DETS: &[&str] = &["the", "a", "every", "that", "one", "her", "his", "their", "this", "some"];
const ADJS: &[&str] = &[
    "quiet", "old", "bright", "narrow", "heavy", "gentle", "distant", "broken", "warm", "silver", "tired", "careful",
    "strange", "small", "golden", "empty", "crowded", "patient", "wild", "pale",
];
const NOUNS: &[&str] = &[
    "river", "window", "letter", "garden", "stranger", "morning", "lantern", "road", "child", "story", "house",
    "horse", "door", "evening", "music", "field", "wind", "boat", "teacher", "winter", "candle", "bridge", "promise",
    "shadow", "kitchen", "forest", "song", "coat", "voice", "table",
];
const VERBS: &[&str] = &[
    "carried",
    "watched",
    "followed",
    "opened",
    "remembered",
    "crossed",
    "found",
    "left",
    "answered",
    "painted",
    "wrote",
    "heard",
    "kept",
    "lifted",
    "noticed",
    "covered",
    "passed",
    "greeted",
    "closed",
    "touched",
];
const INTRANS: &[&str] =
    &["waited", "smiled", "laughed", "slept", "wandered", "listened", "hesitated", "returned", "whispered", "sighed"];
const ADVS: &[&str] = &[
    "slowly",
    "quietly",
    "again",
    "at last",
    "without a word",
    "for a long time",
    "once more",
    "carefully",
    "suddenly",
    "in silence",
];
const PREPS: &[&str] = &["across", "beside", "behind", "under", "toward", "through", "near", "along", "past", "over"];
const CONJ: &[&str] = &["and", "but", "while", "because", "although", "until", "so"];

fn noun_phrase<R: Rng>(r: &mut R) -> String {
    if r.random_bool(0.55) {
        format!("{} {} {}", pick(r, DETS), pick(r, ADJS), pick(r, NOUNS))
    } else {
        format!("{} {}", pick(r, DETS), pick(r, NOUNS))
    }
}

fn clause<R: Rng>(r: &mut R) -> String {
    let subject = if r.random_bool(0.4) { pick(r, NAMES).to_string() } else { noun_phrase(r) };
    match r.random_range(0..4) {
        0 => format!("{subject} {} {}", pick(r, VERBS), noun_phrase(r)),
        1 => format!("{subject} {} {}", pick(r, INTRANS), pick(r, ADVS)),
        2 => format!("{subject} {} {} {} {}", pick(r, VERBS), noun_phrase(r), pick(r, PREPS), pick(r, PLACES)),
        _ => format!("{subject} {} {} {}", pick(r, INTRANS), pick(r, PREPS), noun_phrase(r)),
    }
}

fn prose_document<R: Rng>(r: &mut R, out: &mut String) {
    let sentences = r.random_range(3..9);
    for i in 0..sentences {
        if i > 0 {
            out.push(' ');
        }
        let s = match r.random_range(0..6) {
            0 => format!("{}, {} {}.", capitalize(&clause(r)), pick(r, CONJ), clause(r)),
            1 => format!("\"{}?\" asked {}.", capitalize(&clause(r)), pick(r, NAMES)),
            2 => format!("\"{},\" said {}.", capitalize(&clause(r)), pick(r, NAMES)),
            3 => format!("In {}, {}.", pick(r, PLACES).trim_start_matches("the "), clause(r)),
            _ => format!("{}.", capitalize(&clause(r))),
        };
        out.push_str(&s);
    }
}

const CODE_NOUNS: &[&str] = &[
    "buf", "len", "idx", "count", "node", "ctx", "cfg", "state", "value", "key", "map", "item", "offset", "total",
    "row", "col", "token", "entry", "span", "frame", "slot", "queue", "header", "payload", "limit",
];
const CODE_VERBS: &[&str] = &[
    "parse", "read", "write", "update", "compute", "build", "flush", "resolve", "encode", "decode", "insert", "remove",
    "find", "check", "load", "merge", "split", "apply",
];
const TYPES: &[&str] = &["u32", "usize", "i64", "f64", "bool", "u8", "String", "Vec<u8>", "Option<usize>"];
const OPS: &[&str] = &["+", "-", "*", "/", "%", "<<", ">>", "&", "|", "^"];
const CMPS: &[&str] = &["<", ">", "<=", ">=", "==", "!="];

fn ident<R: Rng>(r: &mut R) -> String {
    if r.random_bool(0.5) {
        pick(r, CODE_NOUNS).to_string()
    } else {
        format!("{}_{}", pick(r, CODE_NOUNS), pick(r, CODE_NOUNS))
    }
}

fn expr<R: Rng>(r: &mut R, vars: &[String], depth: u32) -> String {
    let v = |r: &mut R| vars.choose(r).cloned().unwrap_or_else(|| "0".into());
    match if depth > 1 { 0 } else { r.random_range(0..6) } {
        0 => {
            if r.random_bool(0.5) {
                v(r)
            } else {
                r.random_range(0..256u32).to_string()
            }
        }
        1 => format!("{} {} {}", v(r), pick(r, OPS), expr(r, vars, depth + 1)),
        2 => format!("{}({})", pick(r, CODE_VERBS), expr(r, vars, depth + 1)),
        3 => format!("{}.{}()", v(r), pick(r, &["len", "clone", "is_empty", "unwrap", "as_ref"])),
        4 => format!("({} {} {})", v(r), pick(r, OPS), r.random_range(1..64u32)),
        _ => format!("{}[{}]", v(r), v(r)),
    }
}

fn statements<R: Rng>(r: &mut R, out: &mut String, vars: &mut Vec<String>, indent: usize, depth: u32) {
    let pad = "    ".repeat(indent);
    for _ in 0..r.random_range(2..6) {
        match r.random_range(0..7) {
            0 | 1 => {
                let name = ident(r);
                let mutable = if r.random_bool(0.4) { "mut " } else { "" };
                let _ = writeln!(out, "{pad}let {mutable}{name} = {};", expr(r, vars, 0));
                vars.push(name);
            }
            2 if depth < 2 => {
                let _ = writeln!(out, "{pad}if {} {} {} {{", expr(r, vars, 1), pick(r, CMPS), expr(r, vars, 1));
                statements(r, out, vars, indent + 1, depth + 1);
                if r.random_bool(0.3) {
                    let _ = writeln!(out, "{pad}}} else {{");
                    statements(r, out, vars, indent + 1, depth + 1);
                }
                let _ = writeln!(out, "{pad}}}");
            }
            3 if depth < 2 => {
                let i = pick(r, &["i", "j", "k", "n"]).to_string();
                let _ = writeln!(out, "{pad}for {i} in 0..{} {{", expr(r, vars, 1));
                vars.push(i);
                statements(r, out, vars, indent + 1, depth + 1);
                vars.pop();
                let _ = writeln!(out, "{pad}}}");
            }
            4 => {
                let _ = writeln!(
                    out,
                    "{pad}// {} the {} before {}",
                    pick(r, CODE_VERBS),
                    pick(r, CODE_NOUNS),
                    pick(r, CODE_VERBS)
                );
            }
            5 => {
                let target = vars.choose(r).cloned().unwrap_or_else(|| "self.total".into());
                let _ = writeln!(out, "{pad}{target} {}= {};", pick(r, &["+", "-", "|", "^"]), expr(r, vars, 1));
            }
            _ => {
                let _ = writeln!(out, "{pad}self.{}({})?;", pick(r, CODE_VERBS), expr(r, vars, 1));
            }
        }
    }
}

fn code_document<R: Rng>(r: &mut R, out: &mut String) {
    let fname = format!("{}_{}", pick(r, CODE_VERBS), pick(r, CODE_NOUNS));
    let mut vars: Vec<String> = Vec::new();
    let mut args = Vec::new();
    for _ in 0..r.random_range(1..4) {
        let a = ident(r);
        args.push(format!("{a}: {}", pick(r, TYPES)));
        vars.push(a);
    }
    if r.random_bool(0.3) {
        let _ = writeln!(
            out,
            "/// {} {} from the {}.",
            capitalize(pick(r, CODE_VERBS)),
            pick(r, CODE_NOUNS),
            pick(r, CODE_NOUNS)
        );
    }
    let _ = writeln!(out, "pub fn {fname}(&mut self, {}) -> Result<{}, Error> {{", args.join(", "), pick(r, TYPES));
    statements(r, out, &mut vars, 1, 0);
    let _ = writeln!(out, "    Ok({})", expr(r, &vars, 1));
    out.push('}');
}

const HISTORY: &[&str] =
    &["HTN", "HLD", "DM2", "CAD", "CHF", "COPD", "CKD", "AFib", "GERD", "OSA", "hypothyroidism", "asthma"];
const COMPLAINTS: &[&str] = &[
    "chest pain",
    "SOB",
    "abd pain",
    "fever",
    "cough",
    "dizziness",
    "N/V",
    "headache",
    "fatigue",
    "LE edema",
    "palpitations",
    "back pain",
];
const MEDS: &[&str] = &[
    "metoprolol",
    "lisinopril",
    "atorvastatin",
    "metformin",
    "furosemide",
    "apixaban",
    "albuterol",
    "omeprazole",
    "levothyroxine",
    "amlodipine",
    "insulin glargine",
    "aspirin",
];
const ROUTES: &[&str] = &["PO daily", "PO BID", "PO TID", "IV q8h", "PO qHS", "SC daily", "PO PRN"];
const PLANS: &[&str] = &[
    "trend trop",
    "repeat BMP in AM",
    "CXR",
    "ECG",
    "cont home meds",
    "d/c planning",
    "PT/OT eval",
    "f/u PCP 1 wk",
    "titrate diuresis",
    "check A1c",
    "CT abd/pelvis w/ contrast",
    "cards consult",
    "r/o ACS",
    "monitor I/Os",
];

fn clinical_document<R: Rng>(r: &mut R, out: &mut String) {
    let age = r.random_range(19..96);
    let sex = pick(r, &["M", "F"]);
    let n_hx = r.random_range(1..4);
    let hx: Vec<&str> = HISTORY.choose_multiple(r, n_hx).copied().collect();
    let _ = write!(
        out,
        "CC: {} x{} {}. HPI: {age} y/o {sex} w/ PMH of {} p/w {}.",
        pick(r, COMPLAINTS),
        r.random_range(1..8),
        pick(r, &["days", "hrs", "wks"]),
        hx.join(", "),
        pick(r, COMPLAINTS)
    );
    let _ = write!(
        out,
        " Vitals: BP {}/{}, HR {}, RR {}, T {}.{}F, SpO2 {}% {}.",
        r.random_range(95..185),
        r.random_range(55..105),
        r.random_range(48..131),
        r.random_range(12..29),
        r.random_range(97..103),
        r.random_range(0..10),
        r.random_range(86..101),
        pick(r, &["RA", "2L NC", "4L NC"])
    );
    let n_meds = r.random_range(1..5);
    let chosen: Vec<&str> = MEDS.choose_multiple(r, n_meds).copied().collect();
    let meds: Vec<String> = chosen
        .into_iter()
        .map(|m| format!("{m} {} mg {}", pick(r, &["5", "10", "20", "25", "40", "50", "81", "500"]), pick(r, ROUTES)))
        .collect();
    let _ = write!(out, " Meds: {}.", meds.join(", "));
    let _ = write!(
        out,
        " Labs: Na {}, K {}.{}, Cr {}.{}, WBC {}.{}, Hgb {}.{}.",
        r.random_range(128..147),
        r.random_range(3..6),
        r.random_range(0..10),
        r.random_range(0..4),
        r.random_range(0..10),
        r.random_range(3..19),
        r.random_range(0..10),
        r.random_range(7..17),
        r.random_range(0..10)
    );
    let n_plans = r.random_range(2..5);
    let plans: Vec<&str> = PLANS.choose_multiple(r, n_plans).copied().collect();
    let _ = write!(out, " A/P: {}.", plans.join("; "));
}
