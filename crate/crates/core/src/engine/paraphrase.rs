//! Natural-language wording for canonical command lists.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Deserialize;

use super::{rng_for, PARAPHRASE_STREAM};
use crate::dsl::print_program;
use crate::llm::{LlmClient, LlmError, Message};
use crate::scene::{apply_transition, BBox, EditCommand, SceneState};

pub const TEMPLATES_JSON: &str = include_str!("../../data/templates.json");

#[derive(Debug, Deserialize)]
struct AdjustTemplates {
    color: Vec<String>,
    size: Vec<String>,
    material: Vec<String>,
    shape: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Templates {
    adjust: AdjustTemplates,
    add: Vec<String>,
    remove: Vec<String>,
    replace: Vec<String>,
    undo: Vec<String>,
    connectives: Vec<String>,
    #[serde(rename = "where")]
    where_: [[String; 3]; 3],
    display: BTreeMap<String, String>,
}

static TEMPLATES: LazyLock<Templates> =
    LazyLock::new(|| serde_json::from_str(TEMPLATES_JSON).expect("bundled templates parse"));

#[derive(Clone, Copy)]
pub enum Phrasing<'a> {
    Template,
    Llm(&'a LlmClient),
}

/// An instruction together with the program it was generated from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paraphrase {
    pub text: String,
    pub dsl: String,
}

fn display(token: &str) -> String {
    TEMPLATES
        .display
        .get(token)
        .cloned()
        .unwrap_or_else(|| token.replace('-', " "))
}

fn where_phrase(b: &BBox) -> &'static str {
    let cell = |start: f64, len: f64| (((start + len / 2.0) * 3.0) as usize).min(2);
    let col = cell(b.x.to_f64(), b.w.to_f64());
    let row = cell(b.y.to_f64(), b.h.to_f64());
    &TEMPLATES.where_[row][col]
}

fn fill(template: &str, slots: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn phrase_one(rng: &mut impl Rng, cmd: &EditCommand, state: &SceneState) -> String {
    let t = &*TEMPLATES;
    let name_of = |id| state.object(id).map(|o| display(&o.name)).unwrap_or_default();
    let pick = |rng: &mut _, list: &[String]| list.choose(rng).expect("templates nonempty").clone();
    match cmd {
        EditCommand::Add { object: o } => fill(
            &pick(rng, &t.add),
            &[
                ("size", display(o.size.token())),
                ("color", display(o.color.token())),
                ("material", display(o.material.token())),
                ("shape", display(o.shape.token())),
                ("name", display(&o.name)),
                ("where", where_phrase(&o.bbox).to_string()),
            ],
        ),
        EditCommand::Remove { target } => fill(&pick(rng, &t.remove), &[("name", name_of(target))]),
        EditCommand::Replace { target, with } => {
            let mut s = fill(
                &pick(rng, &t.replace),
                &[
                    ("name", name_of(target)),
                    ("new", display(&with.name)),
                    ("size", display(with.size.token())),
                    ("color", display(with.color.token())),
                    ("material", display(with.material.token())),
                    ("shape", display(with.shape.token())),
                ],
            );
            if let Some(b) = &with.bbox {
                s.push(' ');
                s.push_str(where_phrase(b));
            }
            s
        }
        EditCommand::Adjust { target, value } => {
            let list = match value.attribute() {
                crate::scene::Attribute::Color => &t.adjust.color,
                crate::scene::Attribute::Size => &t.adjust.size,
                crate::scene::Attribute::Material => &t.adjust.material,
                crate::scene::Attribute::Shape => &t.adjust.shape,
            };
            fill(
                &pick(rng, list),
                &[("name", name_of(target)), ("value", display(value.token()))],
            )
        }
        EditCommand::Undo => pick(rng, &t.undo),
    }
}

/// Words turn `turn` (applied to `state`) as one instruction. Template
/// wording is a pure function of `(commands, state, seed, turn)`.
pub fn paraphrase(
    commands: &[EditCommand],
    state: &SceneState,
    seed: u64,
    turn: u32,
    phrasing: Phrasing<'_>,
) -> Result<Paraphrase, LlmError> {
    let dsl = print_program(commands);
    let text = match phrasing {
        Phrasing::Template => {
            let mut rng = rng_for(seed, PARAPHRASE_STREAM + turn as u64);
            let mut work = state.clone();
            let mut text = String::new();
            for (i, c) in commands.iter().enumerate() {
                if i > 0 {
                    text.push_str(TEMPLATES.connectives.choose(&mut rng).expect("connectives"));
                }
                text.push_str(&phrase_one(&mut rng, c, &work));
                if let Ok(next) = apply_transition(&work, std::slice::from_ref(c)) {
                    work = next;
                }
            }
            text
        }
        Phrasing::Llm(client) => {
            let objects: Vec<String> = state.objects.iter().map(|o| format!("{} ({})", o.name, o.id)).collect();
            let reply = client.complete(&[
                Message::system(
                    "Rewrite the image edit program as one short, natural request from a user. \
                     Refer to objects by name, not id. Reply with the request text only.",
                ),
                Message::user(format!("objects: {}\nprogram:\n{dsl}", objects.join(", "))),
            ])?;
            let text = reply.trim().trim_matches('"').trim().to_string();
            if text.is_empty() {
                return Err(LlmError::BadResponse("empty paraphrase".into()));
            }
            text
        }
    };
    Ok(Paraphrase { text, dsl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{mock, LlmConfig};
    use crate::scene::testutil::{bbox, obj};
    use crate::scene::{AttrValue, Color, Shape};

    fn cooler_scene() -> SceneState {
        let mut s = SceneState::new(96, 64, Color::Cream);
        let mut o = obj(
            "cooler",
            Color::Red,
            Shape::Rectangle,
            bbox("0.1", "0.1", "0.3", "0.3"),
            0,
        );
        o.name = "cooler".into();
        s.objects.push(o);
        s
    }

    #[test]
    fn golden_colour_adjust() {
        let s = cooler_scene();
        let cmds = [EditCommand::adjust("cooler", AttrValue::Color(Color::SeaFoamGreen))];
        // seed 1 draws the first colour template for turn 1
        let seed = 1;
        let mut rng = rng_for(seed, PARAPHRASE_STREAM + 1);
        assert_eq!(TEMPLATES.adjust.color.choose(&mut rng), TEMPLATES.adjust.color.first());
        let p = paraphrase(&cmds, &s, seed, 1, Phrasing::Template).unwrap();
        assert_eq!(p.text, "change the cooler's color to sea-foam green");
        assert_eq!(p.dsl, print_program(&cmds));
        assert_eq!(p, paraphrase(&cmds, &s, seed, 1, Phrasing::Template).unwrap());
    }

    #[test]
    fn mixed_turns_use_names_as_they_stand() {
        let s = cooler_scene();
        let cmds = [
            EditCommand::adjust("cooler", AttrValue::Color(Color::Navy)),
            EditCommand::remove("cooler"),
        ];
        let text = paraphrase(&cmds, &s, 3, 2, Phrasing::Template).unwrap().text;
        assert!(
            TEMPLATES.connectives.iter().any(|c| text.contains(c.as_str())),
            "{text}"
        );
        assert_eq!(text.matches("cooler").count(), 2, "{text}");
        assert!(!text.contains('{'));
    }

    #[test]
    fn where_grid() {
        assert_eq!(where_phrase(&bbox("0", "0", "0.2", "0.2")), "in the top left");
        assert_eq!(where_phrase(&bbox("0.4", "0.4", "0.2", "0.2")), "in the center");
        assert_eq!(where_phrase(&bbox("0.8", "0.8", "0.2", "0.2")), "in the bottom right");
    }

    #[test]
    fn llm_mode_keeps_dsl() {
        let chat = mock::serve(vec!["\"Please turn the cooler navy.\"\n".into()]);
        let client = LlmClient::new(LlmConfig::new(&chat.url, "m"));
        let cmds = [EditCommand::adjust("cooler", AttrValue::Color(Color::Navy))];
        let p = paraphrase(&cmds, &cooler_scene(), 0, 1, Phrasing::Llm(&client)).unwrap();
        assert_eq!(p.text, "Please turn the cooler navy.");
        assert_eq!(p.dsl, print_program(&cmds));
        let sent = chat.requests.lock().unwrap()[0].to_string();
        assert!(sent.contains("adjust"), "{sent}");
    }
}
