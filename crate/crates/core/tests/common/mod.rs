#![allow(dead_code)]

use std::sync::Arc;

use ragforge_core::corpus::{ChunkConfig, Corpus, Document};
use ragforge_core::embedder::Embedder;
use ragforge_core::engine::{Engine, PipelineDef, Session};
use ragforge_core::index::{IndexStore, RaptorParams, RetrievalMethod};
use ragforge_core::llm::Llm;

pub struct Fixture {
    pub _dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub store: Arc<IndexStore>,
    pub engine: Arc<Engine>,
}

pub fn corpus() -> Corpus {
    Corpus::from_documents([
        Document::new(
            "beds.txt",
            "The central hospital has 412 beds across four wings. The east wing holds the \
             maternity ward with 60 beds. Visiting hours run from 9am to 8pm every day. \
             Parking is free for patients staying longer than three days.",
        ),
        Document::new(
            "languages.txt",
            "Interpreters are available for Spanish, Mandarin and Arabic speakers. Patients \
             may request a translator at the front desk. Sign language support is booked \
             through the accessibility office with one day of notice.",
        ),
        Document::new(
            "pharmacy.md",
            "# Pharmacy\nThe outpatient pharmacy is on the ground floor near the main \
             entrance. Prescriptions are filled within two hours. Refills can be ordered \
             online or by phone, and controlled substances require photo identification.",
        ),
        Document::new(
            "cafeteria.txt",
            "The cafeteria serves breakfast from 6am and closes at 7pm. Vegetarian and \
             halal options are offered daily. Staff receive a twenty percent discount.",
        ),
        Document::new(
            "emergency.txt",
            "The emergency department is open around the clock. Triage nurses assess every \
             arrival within fifteen minutes and assign a priority from one to five. Minor \
             injuries are treated in the fast track area next to the ambulance bay. Relatives \
             wait in the family lounge on the first floor, which has vending machines and \
             phone chargers.",
        ),
        Document::new(
            "discharge.md",
            "# Discharge\nPatients are usually discharged before 11am. A nurse reviews \
             medication, follow-up appointments and wound care before the patient leaves. \
             Transport can be arranged for patients without a car. Discharge summaries are \
             sent to the family doctor within two working days, and a copy is available \
             through the patient portal.",
        ),
        Document::new(
            "volunteers.txt",
            "Volunteers staff the information desk, push library carts and guide visitors to \
             wards. Applicants must be at least sixteen years old and complete a background \
             check. Training takes one afternoon and covers infection control, fire safety and \
             patient privacy. Volunteers receive a free meal for every shift of four hours.",
        ),
    ])
}

pub fn grid() -> Vec<ChunkConfig> {
    vec![
        ChunkConfig::new(100, 0).unwrap(),
        ChunkConfig::new(200, 0).unwrap(),
        ChunkConfig::new(400, 0).unwrap(),
    ]
}

pub fn fixture_with(llm: Llm) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus();
    let store = Arc::new(IndexStore::open(dir.path().join("indexes")).unwrap());
    let embedder = Embedder::local();
    store
        .build_all(
            &corpus,
            &grid(),
            &RetrievalMethod::ALL,
            &embedder,
            &Llm::mock(),
            &RaptorParams::default(),
        )
        .unwrap();
    let engine = Arc::new(Engine::new(store.clone(), corpus.digest(), embedder, llm));
    Fixture {
        _dir: dir,
        corpus,
        store,
        engine,
    }
}

pub fn fixture() -> Fixture {
    fixture_with(Llm::mock())
}

impl Fixture {
    pub fn session(&self, pipeline: PipelineDef) -> Session {
        Session::new(self.engine.clone(), pipeline).unwrap()
    }
}

/// Query, rewrite, retrieve, generate, refine, answer.
pub fn six_step() -> PipelineDef {
    use ragforge_core::engine::StepDef;
    PipelineDef::new("six")
        .step(StepDef::query("question"))
        .step(StepDef::llm("rewrite", "Rewrite for search:\n{question}"))
        .step(StepDef::retrieve("context", "{question} {rewrite}"))
        .step(StepDef::llm("draft", "Question: {question}\nContext: {context}"))
        .step(StepDef::llm("refine", "Check this answer:\n{draft}"))
        .step(StepDef::answer("answer", "{refine}"))
}

/// Query, decomposition into a JSON list, per-item retrieve + llm, answer.
pub fn decomposition() -> PipelineDef {
    use ragforge_core::engine::StepDef;
    PipelineDef::new("decompose")
        .step(StepDef::query("question"))
        .step(
            StepDef::llm(
                "split",
                "Break {question} into sub-questions.\n{{\"sub_questions\": [\"beds\", \"interpreters\", \"pharmacy hours\"]}}",
            )
            .with_json_list("sub_questions"),
        )
        .step(StepDef::foreach(
            "each",
            "split",
            "sub",
            vec![
                StepDef::retrieve("sub_context", "{sub}").with_k(2),
                StepDef::llm("sub_answer", "Answer {sub} from:\n{sub_context}"),
            ],
        ))
        .step(StepDef::answer("answer", "{sub_answer}"))
}
