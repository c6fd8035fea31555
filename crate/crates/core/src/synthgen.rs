//! Controlled corpora in which later chunks lose their subject.
//!
//! Every document is about one entity `Entity-<id>`. Chunk 0 introduces it;
//! each later chunk states templated facts about it. With probability
//! `sabotage_rate` a later chunk refers to the entity only by pronoun, so the
//! chunk alone no longer says whom it is about. Queries always name the
//! entity, which makes them answerable only with document context once the
//! chunk is sabotaged.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, CharSpan, ChunkKey, Corpus, Document, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub chunks_per_doc: usize,
    pub facts_per_chunk: usize,
    /// Neutral sentences added to every chunk.
    pub filler_per_chunk: usize,
    pub sabotage_rate: f64,
    pub queries_per_chunk: usize,
    /// Entities are numbered from here, so disjoint splits can share a seed.
    pub first_entity_id: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 100,
            chunks_per_doc: 8,
            facts_per_chunk: 1,
            filler_per_chunk: 0,
            sabotage_rate: 1.0,
            queries_per_chunk: 1,
            first_entity_id: 0,
            seed: 7,
        }
    }
}

const MAX_ENTITIES: usize = 10_000;

struct Attribute {
    statement: &'static str,
    questions: &'static [&'static str],
    values: &'static [&'static str],
}

const YEARS: &[&str] = &[
    "1961", "1963", "1964", "1966", "1968", "1969", "1971", "1972", "1974", "1975", "1977", "1978", "1980", "1981",
    "1983", "1984", "1986", "1987", "1989", "1990", "1992", "1993", "1995", "1996", "1998", "1999", "2001", "2002",
];
const CLUBS: &[&str] = &[
    "Riverside United", "Northgate Rovers", "Harbor Athletic", "Eastfield Wanderers", "Millbrook Town",
    "Stonebridge City", "Westmoor Albion", "Lakeshore Rangers", "Oakridge Dynamo", "Redcliff Olympic",
    "Silverton Sporting", "Brookhaven Celtic",
];
const TROPHIES: &[&str] = &[
    "Golden Boot", "Silver Shield", "Crystal Cup", "Iron Plate", "Copper Crown", "Emerald Trophy", "Bronze Star",
    "Marble Medal", "Ivory Cup", "Sapphire Shield",
];
const CITIES: &[&str] = &[
    "Lisbon", "Vienna", "Oslo", "Dublin", "Krakow", "Porto", "Lyon", "Turin", "Ghent", "Bergen", "Seville",
    "Bremen", "Malmo", "Zagreb",
];
const PEOPLE: &[&str] = &[
    "Marta Ilves", "Jonas Berg", "Ravi Patel", "Elena Sousa", "Tomas Novak", "Ines Moreau", "Kofi Mensah",
    "Lena Hart", "Omar Haddad", "Sofia Lind", "Pavel Dorn", "Nadia Rossi",
];
const POSITIONS: &[&str] = &[
    "goalkeeper", "defender", "winger", "striker", "midfielder", "sweeper", "fullback", "playmaker",
];
const COUNTS: &[&str] = &[
    "seven", "nine", "eleven", "twelve", "fourteen", "sixteen", "eighteen", "twenty", "twenty-two", "thirty",
];
const INSTRUMENTS: &[&str] = &[
    "piano", "violin", "guitar", "cello", "trumpet", "flute", "drums", "saxophone", "harp", "accordion",
];
const SCHOOLS: &[&str] = &[
    "Harbor Academy", "Pinecrest College", "Valley Institute", "Summit School", "Greenway Lyceum",
    "Bayview Gymnasium", "Northwood College", "Cedar Hall",
];
const COMPANIES: &[&str] = &[
    "Apex Sports", "Strider Gear", "Nova Drinks", "Bolt Footwear", "Kestrel Motors", "Luma Watches",
    "Orbit Telecom", "Vantage Bank",
];
const BODY_PARTS: &[&str] = &["knee", "ankle", "shoulder", "wrist", "hamstring", "elbow", "hip", "calf"];
const NUMBERS: &[&str] = &["3", "5", "7", "8", "9", "10", "11", "14", "17", "19", "21", "23", "27", "99"];
const CAUSES: &[&str] = &[
    "youth football", "animal shelters", "clean rivers", "rural schools", "cancer research", "public libraries",
    "refugee families", "mental health",
];
const DISHES: &[&str] = &[
    "paella", "goulash", "risotto", "dumplings", "moussaka", "ramen", "tagine", "pierogi", "lasagna", "curry",
];

const ATTRIBUTES: &[Attribute] = &[
    Attribute {
        statement: "{S} was born in {V}.",
        questions: &["In which year was {E} born?", "What is the birth year of {E}?"],
        values: YEARS,
    },
    Attribute {
        statement: "{S} played for {V}.",
        questions: &["Which club did {E} play for?", "For which team did {E} play?"],
        values: CLUBS,
    },
    Attribute {
        statement: "{S} won the {V}.",
        questions: &["Which trophy did {E} win?", "What award was won by {E}?"],
        values: TROPHIES,
    },
    Attribute {
        statement: "{S} lives in {V}.",
        questions: &["In which city does {E} live?", "Where does {E} live today?"],
        values: CITIES,
    },
    Attribute {
        statement: "{S} was coached by {V}.",
        questions: &["Who coached {E}?", "Which coach trained {E}?"],
        values: PEOPLE,
    },
    Attribute {
        statement: "{S} usually plays as a {V}.",
        questions: &["What position does {E} play?", "In which role does {E} usually play?"],
        values: POSITIONS,
    },
    Attribute {
        statement: "{S} scored {V} goals in a single season.",
        questions: &["How many goals did {E} score in a season?", "What was the season goal tally of {E}?"],
        values: COUNTS,
    },
    Attribute {
        statement: "{S} enjoys playing the {V}.",
        questions: &["Which instrument does {E} play?", "What musical instrument does {E} enjoy?"],
        values: INSTRUMENTS,
    },
    Attribute {
        statement: "{S} studied at {V}.",
        questions: &["Where did {E} study?", "Which school did {E} attend?"],
        values: SCHOOLS,
    },
    Attribute {
        statement: "{S} signed a sponsorship deal with {V}.",
        questions: &["Which company sponsors {E}?", "Who signed a sponsorship deal with {E}?"],
        values: COMPANIES,
    },
    Attribute {
        statement: "{S} once injured the {V}.",
        questions: &["Which body part did {E} injure?", "What injury did {E} suffer?"],
        values: BODY_PARTS,
    },
    Attribute {
        statement: "{S} wore shirt number {V}.",
        questions: &["Which shirt number did {E} wear?", "What number was on the shirt of {E}?"],
        values: NUMBERS,
    },
    Attribute {
        statement: "{S} founded a charity for {V}.",
        questions: &["Which cause does the charity of {E} support?", "What charity did {E} found?"],
        values: CAUSES,
    },
    Attribute {
        statement: "{S} retired in {V}.",
        questions: &["In which year did {E} retire?", "When did {E} stop playing?"],
        values: YEARS,
    },
    Attribute {
        statement: "{S} likes to cook {V}.",
        questions: &["What dish does {E} like to cook?", "Which meal does {E} enjoy cooking?"],
        values: DISHES,
    },
    Attribute {
        statement: "{S} made a professional debut in {V}.",
        questions: &["When did {E} make a professional debut?", "In which year did {E} debut?"],
        values: YEARS,
    },
];

const PROFESSIONS: &[&str] = &[
    "footballer", "cyclist", "swimmer", "sprinter", "boxer", "rower", "skier", "fencer", "climber", "archer",
];
const COUNTRIES: &[&str] = &[
    "Portugal", "Austria", "Norway", "Ireland", "Poland", "France", "Italy", "Belgium", "Spain", "Germany",
    "Sweden", "Croatia",
];
const BIO_QUESTIONS: [&[&str]; 2] = [
    &["What is the profession of {E}?", "What sport does {E} compete in?"],
    &["Which country is {E} from?", "What is the home country of {E}?"],
];
const FILLERS: &[&str] = &[
    "The season was long and demanding.",
    "Supporters followed every match closely.",
    "The weather that year was unusually mild.",
    "Training sessions started early each morning.",
    "Local newspapers covered the story in detail.",
    "Many young players looked up to this example.",
    "The stadium was often full on weekends.",
    "Travel between games took many hours.",
    "Critics had mixed opinions at first.",
    "Several documentaries later described this period.",
    "The team bus was painted in bright colours.",
    "Ticket prices rose steadily during those years.",
];

/// Text assembled piece by piece while tracking character offsets.
struct TextBuilder {
    text: String,
    chars: usize,
}

impl TextBuilder {
    fn push(&mut self, s: &str) -> CharSpan {
        let start = self.chars;
        self.text.push_str(s);
        self.chars += s.chars().count();
        CharSpan::new(start, self.chars)
    }
}

/// Writes `template` with `{S}` replaced by `subject`; returns the span of `{V}`.
fn push_statement(b: &mut TextBuilder, template: &str, subject: &str, value: &str) -> CharSpan {
    let (before, after) = template.split_once("{V}").expect("template has a value slot");
    b.push(&before.replace("{S}", subject));
    let span = b.push(value);
    b.push(after);
    span
}

struct Fact {
    attribute: usize,
    value_span: CharSpan,
}

pub fn entity_name(id: usize) -> String {
    format!("Entity-{id:04}")
}

/// Generates one corpus. Randomness for content and for the sabotage coins
/// comes from separate streams, so changing `sabotage_rate` alone changes
/// only which mentions are replaced.
pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    if config.n_docs < 2 || config.chunks_per_doc < 2 {
        return Err(Error::Synth("need at least 2 documents of at least 2 chunks".into()));
    }
    if !(0.0..=1.0).contains(&config.sabotage_rate) {
        return Err(Error::Synth(format!("sabotage_rate {} outside [0, 1]", config.sabotage_rate)));
    }
    if config.facts_per_chunk == 0 {
        return Err(Error::Synth("facts_per_chunk must be positive".into()));
    }
    let facts_needed = (config.chunks_per_doc - 1) * config.facts_per_chunk;
    if facts_needed > ATTRIBUTES.len() {
        return Err(Error::Synth(format!(
            "attribute pool exhausted: {facts_needed} facts per document, {} attributes available",
            ATTRIBUTES.len()
        )));
    }
    if config.first_entity_id + config.n_docs > MAX_ENTITIES {
        return Err(Error::Synth(format!("entity pool exhausted: ids stop at {}", MAX_ENTITIES - 1)));
    }
    if config.filler_per_chunk > FILLERS.len() {
        return Err(Error::Synth(format!("filler pool holds {} sentences", FILLERS.len())));
    }

    let mut content = ChaCha8Rng::seed_from_u64(config.seed);
    let mut coins = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ab0_7a9e_c01d_f00d);
    let mut docs = Vec::with_capacity(config.n_docs);
    let mut queries = Vec::new();

    for i in 0..config.n_docs {
        let id = config.first_entity_id + i;
        let name = entity_name(id);
        let doc_id = format!("doc-{id:04}");
        let pronoun = if content.random_bool(0.5) { "He" } else { "She" };
        let mut attrs: Vec<usize> = (0..ATTRIBUTES.len()).collect();
        attrs.shuffle(&mut content);
        attrs.truncate(facts_needed);

        let mut b = TextBuilder {
            text: String::new(),
            chars: 0,
        };
        let mut chunk_spans = Vec::with_capacity(config.chunks_per_doc);
        let mut chunk_facts: Vec<Vec<Fact>> = Vec::with_capacity(config.chunks_per_doc);

        for c in 0..config.chunks_per_doc {
            if c > 0 {
                b.push("\n\n");
            }
            let start = b.chars;
            let sabotaged = c > 0 && coins.random::<f64>() < config.sabotage_rate;
            let mut fillers: Vec<&str> = FILLERS.choose_multiple(&mut content, config.filler_per_chunk).copied().collect();
            fillers.shuffle(&mut content);
            let mut facts = Vec::new();
            if c == 0 {
                let profession = *PROFESSIONS.choose(&mut content).expect("non-empty");
                let country = *COUNTRIES.choose(&mut content).expect("non-empty");
                b.push(&format!("{name} is a "));
                let p_span = b.push(profession);
                b.push(" from ");
                let c_span = b.push(country);
                b.push(".");
                facts.push(Fact {
                    attribute: usize::MAX,
                    value_span: p_span,
                });
                facts.push(Fact {
                    attribute: usize::MAX - 1,
                    value_span: c_span,
                });
            } else {
                let subject = if sabotaged { pronoun } else { name.as_str() };
                for f in 0..config.facts_per_chunk {
                    let a = attrs[(c - 1) * config.facts_per_chunk + f];
                    let attr = &ATTRIBUTES[a];
                    let value = *attr.values.choose(&mut content).expect("non-empty");
                    if f > 0 {
                        b.push(" ");
                    }
                    let span = push_statement(&mut b, attr.statement, if f == 0 { subject } else { pronoun }, value);
                    facts.push(Fact {
                        attribute: a,
                        value_span: span,
                    });
                }
            }
            for filler in fillers {
                b.push(" ");
                b.push(filler);
            }
            chunk_spans.push(CharSpan::new(start, b.chars));
            chunk_facts.push(facts);
        }

        for (c, facts) in chunk_facts.iter().enumerate() {
            for k in 0..config.queries_per_chunk {
                let fact = &facts[k % facts.len()];
                let templates = match fact.attribute {
                    usize::MAX => BIO_QUESTIONS[0],
                    a if a == usize::MAX - 1 => BIO_QUESTIONS[1],
                    a => ATTRIBUTES[a].questions,
                };
                let template = *templates.choose(&mut content).expect("non-empty");
                queries.push(Query {
                    query_id: format!("{doc_id}-c{c}-q{k}"),
                    text: template.replace("{E}", &name),
                    gold: [ChunkKey::new(doc_id.clone(), c)].into(),
                    answer_span: Some(AnswerSpan {
                        doc_id: doc_id.clone(),
                        start: fact.value_span.start,
                        end: fact.value_span.end,
                    }),
                });
            }
        }
        docs.push(Document::from_spans(doc_id, b.text, &chunk_spans));
    }
    Corpus::new(docs, queries)
}

/// One corpus per sabotage rate, all from the same seed.
pub fn sabotage_sweep_corpora(config: &SynthConfig, p_values: &[f64]) -> Result<Vec<Corpus>> {
    p_values
        .iter()
        .map(|&p| {
            generate(&SynthConfig {
                sabotage_rate: p,
                ..config.clone()
            })
        })
        .collect()
}
