//! Deterministic templated stories.
//!
//! Each story is a title paragraph followed by five sentences. Sentence `i`
//! mentions characters `i` and `i + 1` of a five-character cycle, so a
//! missing middle sentence is pinned down only by reading both the sentence
//! before it and the sentence after it.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_document_with_id, CorpusError, Document};

const NAMES: &[&str] = &[
    "Anna", "Ben", "Carla", "David", "Emma", "Frank", "Grace", "Henry", "Iris", "Jack", "Kate", "Leo", "Maya", "Nick",
    "Olivia", "Paul", "Rosa", "Sam", "Tina", "Victor", "Wendy", "Adam", "Bella", "Chris", "Dora", "Eli", "Fiona",
    "Gus", "Hannah", "Ivan",
];
const PLACES: &[&str] = &[
    "park", "market", "library", "beach", "station", "cafe", "school", "garden", "museum", "harbor", "bakery", "river",
];
const OBJECTS: &[&str] = &[
    "kite", "book", "lamp", "map", "basket", "guitar", "hat", "letter", "clock", "scarf", "camera", "bicycle",
    "umbrella", "puzzle",
];
const ADJECTIVES: &[&str] = &["red", "small", "new", "blue", "heavy", "strange", "bright", "tiny"];
const DAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

struct Cast<'a> {
    who: [&'a str; 5],
    place: &'a str,
    object: &'a str,
    adj: &'a str,
    day: &'a str,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(i: usize, variant: usize, c: &Cast<'_>) -> String {
    let [a, b, cc, d, e] = c.who;
    let (p, o, adj, day) = (c.place, c.object, c.adj, c.day);
    match (i, variant) {
        (0, 0) => format!("{a} met {b} at the {p} on a quiet {day} morning."),
        (0, 1) => format!("One {day}, {a} ran into {b} near the busy {p}."),
        (0, _) => format!("{a} and {b} walked to the {p} together on {day}."),
        (1, 0) => format!("{b} had found a {adj} {o} and gave it to {cc}."),
        (1, 1) => format!("Back home, {b} handed {cc} the {adj} {o} from the {p}."),
        (1, _) => format!("{b} told {cc} about a {adj} {o} lying by the {p}."),
        (2, 0) => format!("{cc} carried the {o} around and showed it to {d}."),
        (2, 1) => format!("Later that day, {cc} showed the {o} to {d} over dinner."),
        (2, _) => format!("{cc} asked {d} whether the {o} looked familiar at all."),
        (3, 0) => format!("{d} was sure that {e} had lost the {o} there."),
        (3, 1) => format!("{d} remembered that the {o} belonged to {e} and called at once."),
        (3, _) => format!("{d} knew {e} had been looking for a {o} all week."),
        (4, 0) => format!("In the end, {e} thanked {a} for finding the {adj} {o}."),
        (4, 1) => format!("{e} smiled and invited {a} back to the {p} next {day}."),
        _ => format!("{e} sent {a} a note about the {o} the next morning."),
    }
}

/// Story `index` of the corpus generated from `seed`.
pub fn story(seed: u64, index: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut who = [""; 5];
    let picked: Vec<&&str> = NAMES.choose_multiple(&mut rng, 5).collect();
    for (slot, name) in who.iter_mut().zip(picked) {
        *slot = name;
    }
    let cast = Cast {
        who,
        place: PLACES.choose(&mut rng).expect("non-empty"),
        object: OBJECTS.choose(&mut rng).expect("non-empty"),
        adj: ADJECTIVES.choose(&mut rng).expect("non-empty"),
        day: DAYS.choose(&mut rng).expect("non-empty"),
    };
    let title = format!("The {} {}", capitalize(cast.adj), capitalize(cast.object));
    let body: Vec<String> = (0..5).map(|i| sentence(i, rng.random_range(0..3), &cast)).collect();
    format!("{title}\n\n{}", body.join(" "))
}

pub fn stories(n: usize, seed: u64) -> Vec<String> {
    (0..n as u64).map(|i| story(seed, i)).collect()
}

/// Parsed stories with ids `synth-{index}`.
pub fn corpus(n: usize, seed: u64) -> Result<Vec<Document>, CorpusError> {
    (0..n as u64)
        .map(|i| parse_document_with_id(format!("synth-{i:06}"), &story(seed, i), true))
        .collect()
}
