//! Word pools for filler prose, needle keys and vote candidates.

use rand::seq::SliceRandom;
use rand::Rng;

pub const FIRST_NAMES: &[&str] = &[
    "Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Grace", "Hiroshi", "Ingrid", "Jamal", "Keiko", "Lorenzo",
    "Maya", "Nikolai", "Olga", "Pedro", "Quinn", "Rosa", "Samir", "Tamsin", "Umar", "Vera", "Wendell", "Ximena",
    "Yusuf", "Zofia", "Amara", "Bjorn", "Carmen", "Desmond", "Esther", "Felix", "Gwen", "Hector", "Isla", "Jonas",
];

pub const PLACES: &[&str] = &[
    "Lisbon", "Nairobi", "Osaka", "Quito", "Tromso", "Valparaiso", "Hanoi", "Krakow", "Reykjavik", "Marrakesh",
    "Auckland", "Bergen", "Cusco", "Dakar", "Edinburgh", "Florence", "Goa", "Havana", "Istanbul", "Jaipur", "Kyoto",
    "Lyon", "Montreal", "Nagoya", "Oaxaca", "Porto", "Riga", "Seville", "Tbilisi", "Utrecht", "Vilnius", "Zagreb",
];

pub const ADJECTIVES: &[&str] = &[
    "amber", "brisk", "copper", "dusty", "elegant", "fragile", "gentle", "hollow", "ivory", "jagged", "keen", "lucid",
    "mellow", "nimble", "opal", "placid", "quiet", "rustic", "silent", "tawny", "umber", "vivid", "woven", "young",
    "zesty", "ancient", "bitter", "crimson", "distant", "eager", "frosty", "golden",
];

pub const NOUNS: &[&str] = &[
    "harbor", "lantern", "meadow", "orchard", "pebble", "quarry", "river", "summit", "thicket", "valley", "willow",
    "beacon", "canyon", "delta", "ember", "falcon", "glacier", "heron", "island", "juniper", "kestrel", "lagoon",
    "marsh", "nectar", "otter", "prairie", "quill", "ridge", "spruce", "tundra", "upland", "vessel",
];

const SUBJECTS: &[&str] = &[
    "The old ferryman",
    "A traveling merchant",
    "The village council",
    "Her younger brother",
    "The night watchman",
    "A group of students",
    "The museum curator",
    "Our neighbor",
    "The orchestra",
    "A quiet stranger",
    "The harbor master",
    "The librarian",
];

const VERBS: &[&str] = &[
    "carefully repaired",
    "described at length",
    "walked past",
    "painted",
    "argued about",
    "quietly admired",
    "sketched",
    "forgot about",
    "wrote a letter about",
    "photographed",
    "measured",
    "talked fondly of",
];

const OBJECTS: &[&str] = &[
    "the wooden bridge near the mill",
    "a map of the northern coast",
    "the garden behind the chapel",
    "an unusually tall lighthouse",
    "the weather over the hills",
    "a crate of ripe pears",
    "the clock tower in the square",
    "a faded tapestry",
    "the stone wall along the road",
    "a small fishing boat",
    "the orchard at the edge of town",
    "a bundle of old newspapers",
];

const TAILS: &[&str] = &[
    "before the rain arrived",
    "during the long winter",
    "on a bright afternoon",
    "while the market was closing",
    "after the festival ended",
    "as the tide went out",
    "without telling anyone",
    "early in the morning",
];

/// One sentence of neutral filler prose.
pub fn filler_sentence<R: Rng>(rng: &mut R) -> String {
    let s = SUBJECTS.choose(rng).unwrap();
    let v = VERBS.choose(rng).unwrap();
    let o = OBJECTS.choose(rng).unwrap();
    if rng.gen_bool(0.5) {
        let t = TAILS.choose(rng).unwrap();
        format!("{s} {v} {o} {t}.")
    } else {
        format!("{s} {v} {o}.")
    }
}

pub fn adjective_noun<R: Rng>(rng: &mut R) -> String {
    format!("{}-{}", ADJECTIVES.choose(rng).unwrap(), NOUNS.choose(rng).unwrap())
}

pub const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

pub fn alnum<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| ALNUM[rng.gen_range(0..ALNUM.len())] as char).collect()
}

pub fn uuid_like<R: Rng>(rng: &mut R) -> String {
    const HEX: &[u8] = b"0123456789abcdef";
    let mut out = String::with_capacity(36);
    for (i, group) in [8, 4, 4, 4, 12].into_iter().enumerate() {
        if i > 0 {
            out.push('-');
        }
        out.extend((0..group).map(|_| HEX[rng.gen_range(0..16)] as char));
    }
    out
}
