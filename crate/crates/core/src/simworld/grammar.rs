//! Closed instruction grammar: templater and clause parser.
//!
//! ```text
//! instruction := (clause ".")*
//! clause      := "walk forward" | "turn left" | "turn right" | "stop"
//!              | "pass the" LM | "stop at the" LM | "go toward the" LM
//! LM          := color category
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::scene::{cell_center, Scene};
use super::trajectory::{ActionKind, Trajectory};
use super::{CATEGORY_NAMES, COLOR_NAMES, DIRS};

/// Function words of the grammar in a fixed order.
pub const FUNCTION_WORDS: [&str; 11] = [
    "walk", "forward", "turn", "left", "right", "stop", "pass", "the", "at", "go", "toward",
];
pub const PERIOD: &str = ".";

/// A `<color> <category>` phrase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Landmark {
    pub color: usize,
    pub category: usize,
}

impl Landmark {
    pub fn words(&self) -> [&'static str; 2] {
        [COLOR_NAMES[self.color], CATEGORY_NAMES[self.category]]
    }

    pub fn phrase(&self) -> String {
        self.words().join(" ")
    }

    pub fn parse(color: &str, category: &str) -> Option<Landmark> {
        Some(Landmark {
            color: COLOR_NAMES.iter().position(|c| *c == color)?,
            category: CATEGORY_NAMES.iter().position(|c| *c == category)?,
        })
    }

    /// Parses a phrase such as `"red sofa"`.
    pub fn parse_phrase(s: &str) -> Option<Landmark> {
        let w: Vec<&str> = s.split_whitespace().collect();
        match w.as_slice() {
            [c, k] => Landmark::parse(c, k),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clause {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
    Pass(Landmark),
    StopAt(Landmark),
    GoToward(Landmark),
}

impl Clause {
    pub fn words(&self) -> Vec<&'static str> {
        let lm = |pre: &[&'static str], l: &Landmark| {
            let mut v = pre.to_vec();
            v.extend(l.words());
            v
        };
        match self {
            Clause::Forward => vec!["walk", "forward"],
            Clause::TurnLeft => vec!["turn", "left"],
            Clause::TurnRight => vec!["turn", "right"],
            Clause::Stop => vec!["stop"],
            Clause::Pass(l) => lm(&["pass", "the"], l),
            Clause::StopAt(l) => lm(&["stop", "at", "the"], l),
            Clause::GoToward(l) => lm(&["go", "toward", "the"], l),
        }
    }

    pub fn landmark(&self) -> Option<Landmark> {
        match self {
            Clause::Pass(l) | Clause::StopAt(l) | Clause::GoToward(l) => Some(*l),
            _ => None,
        }
    }

    fn parse(w: &[&str]) -> Option<Clause> {
        Some(match w {
            ["walk", "forward"] => Clause::Forward,
            ["turn", "left"] => Clause::TurnLeft,
            ["turn", "right"] => Clause::TurnRight,
            ["stop"] => Clause::Stop,
            ["pass", "the", c, k] => Clause::Pass(Landmark::parse(c, k)?),
            ["stop", "at", "the", c, k] => Clause::StopAt(Landmark::parse(c, k)?),
            ["go", "toward", "the", c, k] => Clause::GoToward(Landmark::parse(c, k)?),
            _ => return None,
        })
    }
}

/// Renders clauses as word tokens, each clause followed by `"."`.
pub fn render_clauses(clauses: &[Clause]) -> Vec<String> {
    let mut out = Vec::new();
    for c in clauses {
        out.extend(c.words().into_iter().map(String::from));
        out.push(PERIOD.to_string());
    }
    out
}

/// Splits tokens at `"."` and parses each clause. Returns the parsed
/// clauses and the number of non-empty clauses that did not parse.
pub fn parse_instruction<S: AsRef<str>>(tokens: &[S]) -> (Vec<Clause>, usize) {
    let words: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
    let mut clauses = Vec::new();
    let mut skipped = 0;
    for chunk in words.split(|w| *w == PERIOD) {
        if chunk.is_empty() {
            continue;
        }
        match Clause::parse(chunk) {
            Some(c) => clauses.push(c),
            None => skipped += 1,
        }
    }
    (clauses, skipped)
}

/// Distinct landmarks of an instruction in mention order.
pub fn landmarks_of<S: AsRef<str>>(tokens: &[S]) -> Vec<Landmark> {
    let mut seen = BTreeSet::new();
    parse_instruction(tokens)
        .0
        .iter()
        .filter_map(Clause::landmark)
        .filter(|l| seen.insert(*l))
        .collect()
}

fn landmark_of(scene: &Scene, i: usize) -> Landmark {
    Landmark {
        color: scene.objects[i].color,
        category: scene.objects[i].category,
    }
}

/// Ground-truth instruction and landmark list for a trajectory.
///
/// Salient objects (within 2 m, in line of sight) are mentioned as "pass"
/// clauses when first reached, except the one nearest the goal, which
/// becomes "stop at". Runs of two or more forward moves that end facing an
/// object become "go toward".
pub fn synthesize_instruction(scene: &Scene, traj: &Trajectory) -> (Vec<String>, Vec<Landmark>) {
    let poses = &traj.poses;
    let goal_pos = poses.last().map(|p| p.xy()).unwrap_or(cell_center(scene.goal));
    let terminal = scene.salient_objects(goal_pos).first().copied();
    let mut mentioned: BTreeSet<usize> = BTreeSet::new();
    let mut landmarks: Vec<Landmark> = Vec::new();
    let mut clauses: Vec<Clause> = Vec::new();

    let mention = |i: usize, landmarks: &mut Vec<Landmark>, mentioned: &mut BTreeSet<usize>| {
        if mentioned.insert(i) {
            landmarks.push(landmark_of(scene, i));
        }
    };
    let passes = |pos: (f64, f64), mentioned: &BTreeSet<usize>| -> Vec<usize> {
        scene
            .salient_objects(pos)
            .into_iter()
            .filter(|&o| Some(o) != terminal && !mentioned.contains(&o))
            .collect()
    };

    if let Some(p) = poses.first() {
        for o in passes(p.xy(), &mentioned) {
            clauses.push(Clause::Pass(landmark_of(scene, o)));
            mention(o, &mut landmarks, &mut mentioned);
        }
    }
    let acts = &traj.actions;
    let mut i = 0;
    while i < acts.len() {
        match acts[i].kind {
            ActionKind::Forward => {
                let run = acts[i..].iter().take_while(|a| a.kind == ActionKind::Forward).count();
                let end = &poses[(i + run).min(poses.len() - 1)];
                let (dx, dy) = DIRS[end.dir()];
                let c = end.cell();
                let ahead = (c.0 as i64 + dx, c.1 as i64 + dy);
                let target = (run >= 2 && scene.in_grid(ahead.0, ahead.1))
                    .then(|| (ahead.0 as usize, ahead.1 as usize))
                    .filter(|&a| !scene.wall_between(c, a))
                    .and_then(|a| scene.object_at(a));
                let moves = if let Some(o) = target {
                    clauses.push(Clause::GoToward(landmark_of(scene, o)));
                    mention(o, &mut landmarks, &mut mentioned);
                    run
                } else {
                    1
                };
                for k in 0..moves {
                    if target.is_none() {
                        clauses.push(Clause::Forward);
                    }
                    let at = &poses[(i + k + 1).min(poses.len() - 1)];
                    for o in passes(at.xy(), &mentioned) {
                        clauses.push(Clause::Pass(landmark_of(scene, o)));
                        mention(o, &mut landmarks, &mut mentioned);
                    }
                }
                i += moves;
            }
            ActionKind::TurnLeft => {
                clauses.push(Clause::TurnLeft);
                i += 1;
            }
            ActionKind::TurnRight => {
                clauses.push(Clause::TurnRight);
                i += 1;
            }
            ActionKind::Stop => {
                match terminal {
                    Some(o) => {
                        clauses.push(Clause::StopAt(landmark_of(scene, o)));
                        mention(o, &mut landmarks, &mut mentioned);
                    }
                    None => clauses.push(Clause::Stop),
                }
                i += 1;
            }
        }
    }
    (render_clauses(&clauses), landmarks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_bad_clauses() {
        let toks: Vec<&str> = "walk forward . fly up . pass the red sofa . stop".split(' ').collect();
        let (c, skipped) = parse_instruction(&toks);
        assert_eq!(skipped, 1);
        assert_eq!(
            c,
            vec![
                Clause::Forward,
                Clause::Pass(Landmark { color: 0, category: 2 }),
                Clause::Stop
            ]
        );
    }

    #[test]
    fn round_trip_rendering() {
        let cl = vec![
            Clause::TurnRight,
            Clause::GoToward(Landmark { color: 3, category: 7 }),
            Clause::StopAt(Landmark { color: 1, category: 0 }),
        ];
        assert_eq!(parse_instruction(&render_clauses(&cl)), (cl, 0));
    }
}
