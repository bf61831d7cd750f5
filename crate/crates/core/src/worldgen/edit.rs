use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{cell_from_words, cell_words, Color, Object, Scene, Shape, MAX_SCENE_OBJECTS};
use super::vocab::TokenSeq;
use super::WorldError;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Recolor,
    Move,
    Add,
    Remove,
}

impl EditOp {
    pub const ALL: [EditOp; 4] = [EditOp::Recolor, EditOp::Move, EditOp::Add, EditOp::Remove];

    pub fn name(self) -> &'static str {
        match self {
            EditOp::Recolor => "recolor",
            EditOp::Move => "move",
            EditOp::Add => "add",
            EditOp::Remove => "remove",
        }
    }

    fn applicable(self, scene: &Scene) -> bool {
        match self {
            EditOp::Add => scene.len() < MAX_SCENE_OBJECTS,
            EditOp::Move => !scene.is_empty() && !scene.free_cells().is_empty(),
            EditOp::Recolor | EditOp::Remove => !scene.is_empty(),
        }
    }
}

/// A fully resolved edit: what the instruction says, independent of wording.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditCommand {
    Recolor { subject: Object, to: Color },
    Move { subject: Object, to: u8 },
    Add { object: Object },
    Remove { subject: Object },
}

impl EditCommand {
    pub fn op(&self) -> EditOp {
        match self {
            EditCommand::Recolor { .. } => EditOp::Recolor,
            EditCommand::Move { .. } => EditOp::Move,
            EditCommand::Add { .. } => EditOp::Add,
            EditCommand::Remove { .. } => EditOp::Remove,
        }
    }

    /// Cells whose content the edit changes.
    pub fn touched_cells(&self) -> Vec<u8> {
        match *self {
            EditCommand::Recolor { subject, .. } | EditCommand::Remove { subject } => vec![subject.cell],
            EditCommand::Move { subject, to } => vec![subject.cell, to],
            EditCommand::Add { object } => vec![object.cell],
        }
    }

    pub fn apply(&self, scene: &Scene) -> Result<Scene, WorldError> {
        let mut objs: Vec<Object> = scene.objects().to_vec();
        let find = |objs: &[Object], o: &Object| {
            objs.iter()
                .position(|x| x == o)
                .ok_or_else(|| WorldError::InvalidArgument(format!("edit subject {o:?} not in scene")))
        };
        match *self {
            EditCommand::Recolor { subject, to } => {
                let i = find(&objs, &subject)?;
                objs[i].color = to;
            }
            EditCommand::Move { subject, to } => {
                let i = find(&objs, &subject)?;
                objs[i].cell = to;
            }
            EditCommand::Add { object } => objs.push(object),
            EditCommand::Remove { subject } => {
                let i = find(&objs, &subject)?;
                objs.remove(i);
            }
        }
        Scene::new(objs)
    }

    /// Instruction text for this command using the given phrasing variant (0 or 1).
    pub fn instruction(&self, variant: usize) -> TokenSeq {
        let mut w: Vec<&'static str> = Vec::new();
        let describe = |w: &mut Vec<&'static str>, o: &Object, article: &'static str, prep: &'static str| {
            w.extend_from_slice(&[article, o.color.word(), o.shape.word(), prep, "the"]);
            w.extend_from_slice(cell_words(o.cell));
        };
        match *self {
            EditCommand::Recolor { subject, to } => {
                if variant == 0 {
                    w.push("recolor");
                    describe(&mut w, &subject, "the", "in");
                    w.extend_from_slice(&["to", to.word()]);
                } else {
                    w.push("paint");
                    describe(&mut w, &subject, "the", "in");
                    w.push(to.word());
                }
            }
            EditCommand::Move { subject, to } => {
                w.push(if variant == 0 { "move" } else { "shift" });
                describe(&mut w, &subject, "the", "in");
                w.extend_from_slice(&["to", "the"]);
                w.extend_from_slice(cell_words(to));
            }
            EditCommand::Add { object } => {
                if variant == 0 {
                    w.push("add");
                    describe(&mut w, &object, "a", "in");
                } else {
                    w.push("place");
                    describe(&mut w, &object, "a", "at");
                }
            }
            EditCommand::Remove { subject } => {
                w.push(if variant == 0 { "remove" } else { "delete" });
                describe(&mut w, &subject, "the", "in");
            }
        }
        TokenSeq::from_words(&w).expect("instruction words are in vocabulary")
    }
}

/// Parses an instruction produced by [`EditCommand::instruction`].
pub fn parse_instruction(seq: &TokenSeq) -> Result<EditCommand, WorldError> {
    let words = seq.words()?;
    let bad = || WorldError::Parse(words.join(" "));
    let verb = *words.first().ok_or_else(bad)?;
    let rest = &words[1..];
    // Subject phrase: article color shape prep "the" position-words...
    let subject_at = |ws: &[&str]| -> Result<(Object, usize), WorldError> {
        if ws.len() < 6 {
            return Err(bad());
        }
        let color = Color::from_word(ws[1]).ok_or_else(bad)?;
        let shape = Shape::from_word(ws[2]).ok_or_else(bad)?;
        let mut end = 5;
        while end < ws.len() && matches!(ws[end], "top" | "bottom" | "left" | "right" | "center") {
            end += 1;
        }
        let cell = cell_from_words(&ws[5..end]).ok_or_else(bad)?;
        Ok((Object { shape, color, cell }, end))
    };
    match verb {
        "recolor" | "paint" => {
            let (subject, end) = subject_at(rest)?;
            let tail = &rest[end..];
            let color_word = match (verb, tail) {
                ("recolor", ["to", c]) => *c,
                ("paint", [c]) => *c,
                _ => return Err(bad()),
            };
            let to = Color::from_word(color_word).ok_or_else(bad)?;
            Ok(EditCommand::Recolor { subject, to })
        }
        "move" | "shift" => {
            let (subject, end) = subject_at(rest)?;
            let tail = &rest[end..];
            if tail.len() < 3 || tail[0] != "to" || tail[1] != "the" {
                return Err(bad());
            }
            let to = cell_from_words(&tail[2..]).ok_or_else(bad)?;
            Ok(EditCommand::Move { subject, to })
        }
        "add" | "place" => {
            let (object, end) = subject_at(rest)?;
            if end != rest.len() {
                return Err(bad());
            }
            Ok(EditCommand::Add { object })
        }
        "remove" | "delete" => {
            let (subject, end) = subject_at(rest)?;
            if end != rest.len() {
                return Err(bad());
            }
            Ok(EditCommand::Remove { subject })
        }
        _ => Err(bad()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub source: Scene,
    pub instruction: TokenSeq,
    pub target: Scene,
    pub op: EditOp,
    pub command: EditCommand,
}

/// Draws an edit for `scene`; ops whose precondition fails are redrawn.
pub fn sample_edit(scene: &Scene, seed_value: u64) -> Result<EditPair, WorldError> {
    if !EditOp::ALL.iter().any(|op| op.applicable(scene)) {
        return Err(WorldError::InvalidArgument("no edit applies to this scene".into()));
    }
    let mut rng = seed::rng_for(seed_value, "edit");
    let op = loop {
        let op = EditOp::ALL[rng.random_range(0..4)];
        if op.applicable(scene) {
            break op;
        }
    };
    let objs = scene.objects();
    let free = scene.free_cells();
    let command = match op {
        EditOp::Recolor => {
            let subject = objs[rng.random_range(0..objs.len())];
            let choices: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != subject.color).collect();
            EditCommand::Recolor { subject, to: choices[rng.random_range(0..choices.len())] }
        }
        EditOp::Move => {
            let subject = objs[rng.random_range(0..objs.len())];
            EditCommand::Move { subject, to: free[rng.random_range(0..free.len())] }
        }
        EditOp::Add => EditCommand::Add {
            object: Object {
                shape: Shape::ALL[rng.random_range(0..3)],
                color: Color::ALL[rng.random_range(0..4)],
                cell: free[rng.random_range(0..free.len())],
            },
        },
        EditOp::Remove => EditCommand::Remove { subject: objs[rng.random_range(0..objs.len())] },
    };
    let variant = rng.random_range(0..2);
    let target = command.apply(scene)?;
    Ok(EditPair { source: scene.clone(), instruction: command.instruction(variant), target, op, command })
}
