use super::{CaptionFactors, Direction, VerbClass, COLOR_NAMES, SHAPE_NAMES};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Padded caption length including BOS and EOS.
pub const CAPTION_LEN: usize = 16;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const VERBS: [&str; 4] = ["push", "move", "slide", "nudge"];
const FILLERS: [&str; 7] = ["the", "block", "to", "towards", "top", "bottom", "middle"];
const DIRECTION_WORDS: [&str; 9] = [
    "left",
    "right",
    "up",
    "down",
    "center",
    "leftwards",
    "rightwards",
    "upwards",
    "downwards",
];

const OBJECT_FORMS: usize = 2;

fn direction_phrases(d: Direction) -> [&'static str; 3] {
    match d {
        Direction::Left => ["to the left", "leftwards", "left"],
        Direction::Right => ["to the right", "rightwards", "right"],
        Direction::Up => ["up", "upwards", "to the top"],
        Direction::Down => ["down", "downwards", "to the bottom"],
        Direction::TowardCenter => ["to the center", "towards the center", "to the middle"],
    }
}

/// Closed caption vocabulary. Ids are stable: specials first, then verbs,
/// fillers, colors, shapes and direction words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let words = SPECIALS
            .iter()
            .chain(VERBS.iter())
            .chain(FILLERS.iter())
            .chain(COLOR_NAMES.iter())
            .chain(SHAPE_NAMES.iter())
            .chain(DIRECTION_WORDS.iter())
            .map(|w| w.to_string())
            .collect();
        Self { words }
    }

    /// Rebuilds a vocabulary from a stored word list.
    pub fn from_words(words: Vec<String>) -> Result<Self, String> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary must start with <pad> <bos> <eos> <unk>".into());
        }
        for (i, w) in words.iter().enumerate() {
            if words[..i].contains(w) {
                return Err(format!("duplicate vocabulary word {w:?}"));
            }
        }
        Ok(Self { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn contains_id(&self, id: u32) -> bool {
        (id as usize) < self.words.len()
    }

    /// Surface text of a token sequence, dropping specials.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t != BOS && t != PAD)
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Whitespace tokenization into a BOS-prefixed, EOS-terminated sequence
/// padded to [`CAPTION_LEN`]. Unknown words map to [`UNK`]; text too long
/// for the padded length is truncated before EOS.
pub fn tokenize(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(CAPTION_LEN);
    out.push(BOS);
    for w in text.split_whitespace().take(CAPTION_LEN - 2) {
        out.push(vocab.id(&w.to_lowercase()).unwrap_or(UNK));
    }
    out.push(EOS);
    out.resize(CAPTION_LEN, PAD);
    out
}

fn surface(factors: &CaptionFactors, seed: u64) -> String {
    let verb = VERBS[(seed % VERBS.len() as u64) as usize];
    let rest = seed / VERBS.len() as u64;
    let color = COLOR_NAMES[factors.color as usize];
    let shape = SHAPE_NAMES[factors.shape as usize];
    let object = if rest.is_multiple_of(OBJECT_FORMS as u64) {
        format!("the {color} {shape}")
    } else {
        format!("the {color} {shape} block")
    };
    let phrases = direction_phrases(factors.direction);
    let phrase = phrases[((rest / OBJECT_FORMS as u64) % phrases.len() as u64) as usize];
    format!("{verb} {object} {phrase}")
}

/// Command text for `factors`. The seed picks the verb synonym, object form
/// and direction phrasing.
pub fn render_caption(factors: &CaptionFactors, seed: u64) -> Vec<u32> {
    tokenize(&Vocab::standard(), &surface(factors, seed))
}

/// Inverse of [`render_caption`] over the template grammar
/// `VERB the COLOR SHAPE [block] DIRECTION-PHRASE`. A leading BOS is
/// optional; reading stops at EOS or PAD.
pub fn parse_caption(tokens: &[u32]) -> Option<CaptionFactors> {
    let vocab = Vocab::standard();
    let body = tokens.strip_prefix(&[BOS]).unwrap_or(tokens);
    let words: Vec<&str> = body
        .iter()
        .take_while(|&&t| t != EOS && t != PAD)
        .map(|&t| vocab.word(t))
        .collect::<Option<_>>()?;
    let (&verb, words) = words.split_first()?;
    if !VERBS.contains(&verb) {
        return None;
    }
    let [the, color, shape, rest @ ..] = words else {
        return None;
    };
    if *the != "the" {
        return None;
    }
    let color = COLOR_NAMES.iter().position(|c| c == color)? as u8;
    let shape = SHAPE_NAMES.iter().position(|s| s == shape)? as u8;
    let rest = match rest {
        ["block", tail @ ..] => tail,
        _ => rest,
    };
    let phrase = rest.join(" ");
    let direction = Direction::ALL
        .into_iter()
        .find(|&d| direction_phrases(d).contains(&phrase.as_str()))?;
    Some(CaptionFactors {
        verb: VerbClass::Push,
        color,
        shape,
        direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{N_COLORS, N_SHAPES};

    fn all_factors() -> Vec<CaptionFactors> {
        let mut v = Vec::new();
        for c in 0..N_COLORS as u8 {
            for s in 0..N_SHAPES as u8 {
                for d in Direction::ALL {
                    v.push(CaptionFactors::new(c, s, d));
                }
            }
        }
        v
    }

    #[test]
    fn seed_zero_is_the_plain_template() {
        let f = CaptionFactors::new(0, 0, Direction::Left);
        let v = Vocab::standard();
        assert_eq!(
            render_caption(&f, 0),
            tokenize(&v, "push the red cube to the left")
        );
        assert_eq!(
            v.decode(&render_caption(&f, 0)),
            "push the red cube to the left"
        );
    }

    #[test]
    fn seed_five_changes_surface_but_not_meaning() {
        let f = CaptionFactors::new(0, 0, Direction::Left);
        let a = render_caption(&f, 0);
        let b = render_caption(&f, 5);
        assert_ne!(a, b);
        assert_eq!(parse_caption(&b), Some(f));
    }

    #[test]
    fn captions_are_framed_and_padded() {
        for f in all_factors() {
            for seed in 0..24 {
                let t = render_caption(&f, seed);
                assert_eq!(t.len(), CAPTION_LEN);
                assert_eq!(t[0], BOS);
                let eos = t.iter().position(|&x| x == EOS).unwrap();
                assert!(t[eos + 1..].iter().all(|&x| x == PAD));
                assert!(t[1..eos].iter().all(|&x| x > UNK));
            }
        }
    }

    #[test]
    fn parse_inverts_render_for_every_factor_and_100_seeds() {
        for f in all_factors() {
            for seed in 0..100 {
                assert_eq!(parse_caption(&render_caption(&f, seed)), Some(f));
            }
        }
    }

    #[test]
    fn every_slot_has_at_least_three_surface_forms() {
        let f = CaptionFactors::new(1, 2, Direction::Up);
        let v = Vocab::standard();
        let surfaces: std::collections::BTreeSet<String> =
            (0..24).map(|s| v.decode(&render_caption(&f, s))).collect();
        let verbs: std::collections::BTreeSet<&str> = surfaces
            .iter()
            .map(|s| s.split(' ').next().unwrap())
            .collect();
        assert!(verbs.len() >= 3);
        assert_eq!(surfaces.len(), 24);
    }

    #[test]
    fn parses_hand_written_commands() {
        let v = Vocab::standard();
        let f = parse_caption(&tokenize(&v, "slide the red cube leftwards")).unwrap();
        assert_eq!(f, CaptionFactors::new(0, 0, Direction::Left));
        let f = parse_caption(&tokenize(
            &v,
            "nudge the yellow heart block towards the center",
        ));
        assert_eq!(f, Some(CaptionFactors::new(3, 4, Direction::TowardCenter)));
    }

    #[test]
    fn rejects_text_outside_the_grammar() {
        let v = Vocab::standard();
        for text in [
            "the the the",
            "",
            "push the red cube",
            "push red cube left",
            "push the red cube left now",
            "push the cube red left",
            "push the red cube block block left",
            "kick the red cube left",
        ] {
            assert_eq!(parse_caption(&tokenize(&v, text)), None, "{text:?}");
        }
        assert_eq!(parse_caption(&[BOS, 999, EOS]), None);
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let v = Vocab::standard();
        assert!(v.len() <= 45);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(Vocab::from_words(v.words().to_vec()).unwrap(), v);
        assert!(Vocab::from_words(vec!["x".into()]).is_err());
    }

    #[test]
    fn unknown_words_become_unk() {
        let t = tokenize(&Vocab::standard(), "push the purple cube");
        assert_eq!(t[3], UNK);
    }
}
