mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::{decomposition, fixture, fixture_with, six_step};
use ragforge_core::corpus::ChunkConfig;
use ragforge_core::engine::{
    EngineError, ManualChunk, Origin, OverridePayload, PipelineDef, RetrieverPatch, RunEvent,
    StepDef, StepKind, StepOutput, BASELINE_ANSWER_PROMPT,
};
use ragforge_core::index::{IndexKey, RetrievalMethod};
use ragforge_core::llm::{Llm, MockLlm};

const QUESTION: &str = "How many beds does the hospital have?";

fn mock_rule(prompt: &str) -> String {
    let last = prompt.lines().last().unwrap_or("");
    format!("MOCK: {last}").chars().take(200 * 4).collect()
}

fn text_of(out: &StepOutput) -> String {
    match out {
        StepOutput::QueryText { text }
        | StepOutput::Generation { text, .. }
        | StepOutput::FinalAnswer { text, .. } => text.clone(),
        StepOutput::Chunks { .. } => panic!("chunks have no text"),
    }
}

fn selected(out: &StepOutput) -> Vec<String> {
    out.selected_chunk_ids().into_iter().map(String::from).collect()
}

/// Context block built straight from the index store.
fn context_oracle(f: &common::Fixture, query: &str, size: usize, k: usize) -> String {
    let key = IndexKey::new(
        f.corpus.digest(),
        ChunkConfig::new(size, 0).unwrap(),
        RetrievalMethod::CosineSim,
    );
    let r = f
        .store
        .retrieve(&key, query, k, 0.5, f.engine.embedder())
        .unwrap();
    r.chunks
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[({})] {}", i + 1, c.chunk.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn baseline_prompt(question: &str, context: &str) -> String {
    BASELINE_ANSWER_PROMPT
        .replace("{question}", question)
        .replace("{context}", context)
}

#[test]
fn baseline_run_records_four_steps() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    let t = s.run_pipeline(QUESTION).unwrap();
    let kinds: Vec<StepKind> = t.steps.iter().map(|s| s.kind).collect();
    assert_eq!(
        kinds,
        [StepKind::Query, StepKind::Retrieve, StepKind::Llm, StepKind::Answer]
    );
    assert!(t.steps.iter().all(|s| s.origin == Origin::Recorded && !s.stale));
    assert_eq!(t.query, QUESTION);

    let ctx = context_oracle(&f, QUESTION, 200, 5);
    assert_eq!(selected(&t.steps[1].output).len(), 5);
    assert_eq!(t.steps[1].output.render(), ctx);
    let expected = mock_rule(&baseline_prompt(QUESTION, &ctx));
    assert_eq!(text_of(&t.steps[2].output), expected);
    assert_eq!(t.final_answer(), Some(expected.as_str()));
    assert!(t.failure.is_none());
}

#[test]
fn repeated_runs_are_identical() {
    let f = fixture();
    let s = f.session(six_step());
    let a = s.run_pipeline(QUESTION).unwrap();
    let b = s.run_pipeline(QUESTION).unwrap();
    assert_ne!(a.trace_id, b.trace_id);
    assert_eq!(a.content_digest(), b.content_digest());
    let other = f.session(six_step()).run_pipeline(QUESTION).unwrap();
    assert_eq!(a.content_digest(), other.content_digest());
}

#[test]
fn empty_query_is_rejected() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    assert!(matches!(s.run_pipeline("  \n"), Err(EngineError::EmptyQuery)));
    assert!(s.active_trace().is_none());
}

#[test]
fn foreach_expands_per_item() {
    let f = fixture();
    let s = f.session(decomposition());
    let t = s.run_pipeline("Tell me about the hospital").unwrap();
    // query, split, 3 x (retrieve, llm), answer
    assert_eq!(t.steps.len(), 9);
    let StepOutput::Generation { parsed, .. } = &t.steps[1].output else {
        panic!("split is an llm step")
    };
    let items = parsed.clone().unwrap();
    assert_eq!(items, ["beds", "interpreters", "pharmacy hours"]);
    for (i, item) in items.iter().enumerate() {
        let r = &t.steps[2 + 2 * i];
        let l = &t.steps[3 + 2 * i];
        assert_eq!((r.kind, r.iteration), (StepKind::Retrieve, Some(i)));
        assert_eq!((l.kind, l.iteration), (StepKind::Llm, Some(i)));
        assert_eq!(r.output.render(), context_oracle(&f, item, 200, 2));
    }
    let per_item: Vec<String> = (0..3).map(|i| text_of(&t.steps[3 + 2 * i].output)).collect();
    assert_eq!(t.final_answer().unwrap(), per_item.join("\n\n"));
    let indices: Vec<usize> = t.steps.iter().map(|s| s.index).collect();
    assert_eq!(indices, (0..9).collect::<Vec<_>>());
}

#[test]
fn run_step_changes_only_target_and_marks_downstream_stale() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    let before = s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        k: Some(10),
        ..Default::default()
    });
    let after = s.run_step(1, Some(&payload)).unwrap();
    assert_eq!(after.lineage.as_deref(), Some(before.trace_id.as_str()));
    assert_eq!(selected(&after.steps[1].output).len(), 10);
    assert_eq!(after.steps[1].origin, Origin::Overridden);
    assert_eq!(after.steps[1].output.render(), context_oracle(&f, QUESTION, 200, 10));
    assert_eq!(after.steps[0], before.steps[0]);
    for i in 2..4 {
        assert!(after.steps[i].stale);
        assert_eq!(after.steps[i].output, before.steps[i].output);
    }
}

#[test]
fn prompt_override_follows_mock_rule() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let prompt = "Summarize the context.\nAnswer in one word";
    let t = s
        .run_step(2, Some(&OverridePayload::PromptText { text: prompt.into() }))
        .unwrap();
    assert_eq!(text_of(&t.steps[2].output), "MOCK: Answer in one word");
    assert_eq!(t.steps[2].overrides.prompt.as_deref(), Some(prompt));
}

#[test]
fn manual_chunks_select_exactly_those() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    let t = s.run_pipeline(QUESTION).unwrap();
    let all = s.step_chunks(1).unwrap();
    assert!(all.len() > 5);
    assert_eq!(all.iter().filter(|c| c.selected).count(), 5);
    // Pick two chunks from outside the top five.
    let picks: Vec<String> = all[all.len() - 2..].iter().map(|c| c.chunk.chunk_id.clone()).collect();
    let payload = OverridePayload::ManualChunks {
        chunks: picks
            .iter()
            .map(|id| ManualChunk {
                chunk_id: id.clone(),
                selected: true,
            })
            .collect(),
    };
    let t2 = s.run_all(1, Some(&payload)).unwrap();
    let mut got = selected(&t2.steps[1].output);
    got.sort();
    let mut want = picks.clone();
    want.sort();
    assert_eq!(got, want);
    let prompt_ctx = t2.steps[1].output.render();
    assert_eq!(
        text_of(&t2.steps[2].output),
        mock_rule(&baseline_prompt(QUESTION, &prompt_ctx))
    );
    assert_ne!(t.content_digest(), t2.content_digest());

    let bad = OverridePayload::ManualChunks {
        chunks: vec![ManualChunk {
            chunk_id: "nope.txt#0..1".into(),
            selected: true,
        }],
    };
    let err = s.run_all(1, Some(&bad)).unwrap_err();
    assert_eq!(err.root_cause().code(), "UnknownChunk");
}

#[test]
fn run_all_on_last_step_touches_only_it() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    let before = s.run_pipeline(QUESTION).unwrap();
    let t = s
        .run_all(3, Some(&OverridePayload::EditedOutput { text: "412 beds".into() }))
        .unwrap();
    assert_eq!(t.final_answer(), Some("412 beds"));
    for i in 0..3 {
        assert_eq!(t.steps[i].origin, Origin::Replayed);
        assert_eq!(t.steps[i].output, before.steps[i].output);
    }
    assert_eq!(t.steps[3].origin, Origin::Overridden);
}

#[test]
fn chunk_size_change_reruns_downstream() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        chunk_size: Some(400),
        ..Default::default()
    });
    let t = s.run_all(1, Some(&payload)).unwrap();
    let ctx = context_oracle(&f, QUESTION, 400, 5);
    assert_eq!(t.steps[1].output.render(), ctx);
    let expected = mock_rule(&baseline_prompt(QUESTION, &ctx));
    assert_eq!(text_of(&t.steps[2].output), expected);
    assert_eq!(t.final_answer(), Some(expected.as_str()));
    assert!(t.steps.iter().all(|s| !s.stale));
    assert_eq!(t.steps[2].origin, Origin::Recorded);
}

#[test]
fn run_all_after_run_step_recomputes_stale_steps() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        k: Some(10),
        ..Default::default()
    });
    s.run_step(1, Some(&payload)).unwrap();
    // Resuming from the answer step must not replay the stale generation.
    let t = s.run_all(3, None).unwrap();
    let ctx = context_oracle(&f, QUESTION, 200, 10);
    assert_eq!(text_of(&t.steps[2].output), mock_rule(&baseline_prompt(QUESTION, &ctx)));
    assert!(t.steps.iter().all(|s| !s.stale));
    // The k override persists on the step.
    assert_eq!(t.steps[1].overrides.retriever.k, Some(10));
}

#[test]
fn edited_list_changes_foreach_cardinality() {
    let f = fixture();
    let s = f.session(decomposition());
    s.run_pipeline("Tell me about the hospital").unwrap();
    let edit = OverridePayload::EditedOutput {
        text: r#"{"sub_questions": ["cafeteria hours", "parking"]}"#.into(),
    };
    let t = s.run_all(1, Some(&edit)).unwrap();
    assert_eq!(t.steps.len(), 2 + 2 * 2 + 1);
    assert_eq!(
        t.steps[2].resolved_params,
        ragforge_core::engine::ResolvedParams::Retrieve {
            query: "cafeteria hours".into(),
            k: 2,
            chunk_size: 200,
            chunk_overlap: 0,
            method: RetrievalMethod::CosineSim,
            mmr_lambda: None,
            manual: None,
        }
    );

    let not_a_list = OverridePayload::EditedOutput {
        text: "no list here".into(),
    };
    let err = s.run_all(1, Some(&not_a_list)).unwrap_err();
    assert_eq!(err.step_index(), Some(1));
    assert_eq!(err.root_cause().code(), "ParseError");
    // The failed run still leaves a trace explaining the failure.
    let active = s.active_trace().unwrap();
    assert_eq!(active.failure.as_ref().unwrap().code, "ParseError");
}

#[test]
fn identity_resume_reproduces_run() {
    let f = fixture();
    let s = f.session(six_step());
    let base = s.run_pipeline(QUESTION).unwrap();
    assert_eq!(base.steps.len(), 6);
    for i in 0..6 {
        let t = s.run_all(i, None).unwrap();
        assert_eq!(t.content_digest(), base.content_digest(), "resume at {i}");
    }
}

#[test]
fn resume_preserves_prefix() {
    let f = fixture();
    let s = f.session(six_step());
    let base = s.run_pipeline(QUESTION).unwrap();
    for i in 0..6 {
        s.run_pipeline(QUESTION).unwrap();
        let payload = match base.steps[i].kind {
            StepKind::Query => OverridePayload::QueryText {
                text: "Where is the pharmacy?".into(),
            },
            StepKind::Retrieve => OverridePayload::RetrieverParams(RetrieverPatch {
                k: Some(3),
                ..Default::default()
            }),
            StepKind::Llm => OverridePayload::PromptText {
                text: "Different prompt\nlast line".into(),
            },
            StepKind::Answer => OverridePayload::EditedOutput { text: "x".into() },
            StepKind::Foreach => unreachable!(),
        };
        let t = s.run_all(i, Some(&payload)).unwrap();
        for j in 0..i {
            assert_eq!(t.steps[j].output, base.steps[j].output, "resume at {i}, step {j}");
            assert_eq!(t.steps[j].origin, Origin::Replayed);
        }
        assert_ne!(t.steps[i].output, base.steps[i].output, "step {i} changed");
    }
}

#[test]
fn incompatible_and_out_of_range_requests() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    assert!(matches!(s.run_all(0, None), Err(EngineError::NoTrace)));
    let t = s.run_pipeline(QUESTION).unwrap();
    let gen = s.snapshot().generation;

    let wrong = OverridePayload::PromptText { text: "x".into() };
    let err = s.run_step(1, Some(&wrong)).unwrap_err();
    assert!(matches!(err, EngineError::IncompatibleOverride { index: 1, .. }));
    let err = s.run_all(9, None).unwrap_err();
    assert!(matches!(err, EngineError::StepNotFound { index: 9, len: 4 }));
    let bad_k = OverridePayload::RetrieverParams(RetrieverPatch {
        k: Some(0),
        ..Default::default()
    });
    assert!(matches!(
        s.run_all(1, Some(&bad_k)),
        Err(EngineError::IncompatibleOverride { .. })
    ));
    // Rejected requests leave the session as it was.
    assert_eq!(s.snapshot().generation, gen);
    assert_eq!(s.active_trace().unwrap().trace_id, t.trace_id);
}

#[test]
fn missing_index_fails_with_partial_trace() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        chunk_size: Some(300),
        ..Default::default()
    });
    let err = s.run_all(1, Some(&payload)).unwrap_err();
    assert_eq!(err.step_index(), Some(1));
    assert_eq!(err.root_cause().code(), "IndexMissing");
    let t = s.active_trace().unwrap();
    assert_eq!(t.steps.len(), 1);
    assert_eq!(t.failure.as_ref().unwrap().index, 1);
}

#[test]
fn failed_run_step_keeps_previous_trace() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    let t = s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        chunk_size: Some(300),
        ..Default::default()
    });
    assert!(s.run_step(1, Some(&payload)).is_err());
    assert_eq!(s.active_trace().unwrap().trace_id, t.trace_id);
}

#[test]
fn retained_traces_stay_bounded() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    for n in 0..100 {
        let k = 1 + n % 9;
        let payload = OverridePayload::RetrieverParams(RetrieverPatch {
            k: Some(k),
            ..Default::default()
        });
        s.run_all(1, Some(&payload)).unwrap();
        assert!(s.retained_traces() <= 2);
        if n == 9 {
            assert_eq!(s.pruned_total(), 9);
        }
    }
    assert_eq!(s.retained_traces(), 2);
    assert_eq!(s.pruned_total(), 99);
    assert_eq!(s.prune_stale(), 0);
}

#[test]
fn export_reflects_live_overrides() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        k: Some(10),
        ..Default::default()
    });
    s.run_step(1, Some(&payload)).unwrap();

    let frag = s.export_step(1).unwrap();
    #[derive(serde::Deserialize)]
    struct Fragment {
        steps: Vec<StepDef>,
    }
    let parsed: Fragment = toml::from_str(&frag).unwrap();
    assert_eq!(parsed.steps, [s.live_step_def(1).unwrap()]);
    let StepDef::Retrieve { k, chunk_size, .. } = &parsed.steps[0] else {
        panic!("retrieve fragment expected")
    };
    assert_eq!((*k, *chunk_size), (Some(10), Some(200)));

    let q: Fragment = toml::from_str(&s.export_step(0).unwrap()).unwrap();
    assert!(matches!(&q.steps[0], StepDef::Query { text: Some(t), .. } if t == QUESTION));

    // Swapping the exported step into the pipeline reproduces the override.
    let mut def = (*s.pipeline()).clone();
    def.steps[1] = parsed.steps[0].clone();
    let fresh = f.session(def);
    let t = fresh.run_pipeline(QUESTION).unwrap();
    assert_eq!(t.steps[1].output, s.active_trace().unwrap().steps[1].output);

    let p = OverridePayload::PromptText {
        text: "Literal {braces} stay\nend".into(),
    };
    s.run_step(2, Some(&p)).unwrap();
    let frag: Fragment = toml::from_str(&s.export_step(2).unwrap()).unwrap();
    let StepDef::Llm { prompt, .. } = &frag.steps[0] else {
        panic!()
    };
    assert_eq!(prompt, "Literal {{braces}} stay\nend");
}

#[test]
fn pipeline_edit_detected_on_resume() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let mut def = PipelineDef::baseline();
    if let StepDef::Retrieve { k, .. } = &mut def.steps[1] {
        *k = Some(3);
    }
    s.set_pipeline(def).unwrap();
    let err = s.run_all(2, None).unwrap_err();
    assert!(matches!(err, EngineError::ReplayDivergence { index: 1, .. }), "{err:?}");
    // Resuming at or before the edited step is fine.
    let t = s.run_all(1, None).unwrap();
    assert_eq!(selected(&t.steps[1].output).len(), 3);
}

#[test]
fn concurrent_run_is_busy() {
    let f = fixture_with(Llm::new(Arc::new(MockLlm::with_latency(Duration::from_millis(400)))));
    let s = Arc::new(f.session(PipelineDef::baseline()));
    let bg = {
        let s = s.clone();
        std::thread::spawn(move || s.run_pipeline(QUESTION))
    };
    std::thread::sleep(Duration::from_millis(100));
    assert!(s.is_running());
    assert!(matches!(s.run_pipeline(QUESTION), Err(EngineError::Busy)));
    assert!(matches!(s.set_pipeline(PipelineDef::baseline()), Err(EngineError::Busy)));
    bg.join().unwrap().unwrap();
    assert!(!s.is_running());
}

#[test]
fn events_describe_each_run() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = log.clone();
    s.set_observer(Some(Arc::new(move |e: &RunEvent| sink.lock().unwrap().push(e.clone()))));
    s.run_pipeline(QUESTION).unwrap();
    s.run_step(2, None).unwrap();
    s.run_all(1, None).unwrap();
    let events = log.lock().unwrap().clone();
    let count = |f: fn(&RunEvent) -> bool| events.iter().filter(|e| f(e)).count();
    assert_eq!(count(|e| matches!(e, RunEvent::RunStarted { .. })), 3);
    assert_eq!(count(|e| matches!(e, RunEvent::RunFinished { .. })), 3);
    assert_eq!(count(|e| matches!(e, RunEvent::StepFinished { .. })), 4 + 1 + 4);
    assert!(matches!(events[0], RunEvent::RunStarted { generation: 1, .. }));
    assert!(matches!(events.last(), Some(RunEvent::RunFinished { generation: 3, steps: 4 })));
}

#[test]
fn when_condition_skips_step() {
    let f = fixture();
    let def = PipelineDef::new("cond")
        .step(StepDef::query("question"))
        .step(StepDef::llm("check", "Is it about beds?\nfalse"))
        .step(StepDef::retrieve("context", "{question}"))
        .step(StepDef::llm("extra", "More: {context}").with_when("{check}"))
        .step(StepDef::answer("answer", "[{extra}]"));
    let s = f.session(def);
    let t = s.run_pipeline(QUESTION).unwrap();
    // "MOCK: false" is truthy, so the step runs.
    assert_eq!(t.steps.len(), 5);

    // An edited "false" skips it on resume and it renders as empty text.
    let edit = OverridePayload::EditedOutput { text: " False ".into() };
    let t = s.run_all(1, Some(&edit)).unwrap();
    let names: Vec<&str> = t.steps.iter().map(|s| s.step_name.as_str()).collect();
    assert_eq!(names, ["question", "check", "context", "answer"]);
    assert_eq!(t.final_answer(), Some("[]"));
}

#[test]
fn override_payload_json_shapes() {
    let p: OverridePayload =
        serde_json::from_str(r#"{"type":"retriever_params","k":10,"method":"mmr"}"#).unwrap();
    assert_eq!(
        p,
        OverridePayload::RetrieverParams(RetrieverPatch {
            k: Some(10),
            method: Some(RetrievalMethod::Mmr),
            ..Default::default()
        })
    );
    let round: OverridePayload = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(round, p);
    assert!(serde_json::from_str::<OverridePayload>(r#"{"type":"prompt_text","txt":"a"}"#).is_err());
    assert!(serde_json::from_str::<OverridePayload>(r#"{"type":"teleport"}"#).is_err());
}

#[test]
fn recomputed_steps_keep_parameter_edits() {
    let f = fixture();
    let s = f.session(six_step());
    s.run_pipeline(QUESTION).unwrap();
    let prompt = OverridePayload::PromptText {
        text: "Draft prompt\nkept line".into(),
    };
    s.run_step(3, Some(&prompt)).unwrap();
    let edit = OverridePayload::EditedOutput { text: "hand edit".into() };
    s.run_step(4, Some(&edit)).unwrap();
    let k = OverridePayload::RetrieverParams(RetrieverPatch {
        k: Some(2),
        ..Default::default()
    });
    // Resume upstream of both edits.
    let t = s.run_all(2, Some(&k)).unwrap();
    assert_eq!(selected(&t.steps[2].output).len(), 2);
    assert_eq!(text_of(&t.steps[3].output), "MOCK: kept line");
    assert_eq!(t.steps[3].origin, Origin::Recorded);
    // The edited output is recomputed from the new draft.
    assert_eq!(text_of(&t.steps[4].output), "MOCK: MOCK: kept line");
    assert_eq!(t.steps[4].overrides.edited_output, None);
}

#[test]
fn override_shadows_pipeline_edit_of_same_field() {
    let f = fixture();
    let s = f.session(PipelineDef::baseline());
    s.run_pipeline(QUESTION).unwrap();
    let payload = OverridePayload::RetrieverParams(RetrieverPatch {
        k: Some(7),
        ..Default::default()
    });
    s.run_step(1, Some(&payload)).unwrap();
    let mut def = PipelineDef::baseline();
    if let StepDef::Retrieve { k, .. } = &mut def.steps[1] {
        *k = Some(3);
    }
    s.set_pipeline(def).unwrap();
    // The override still decides k, so the recorded step is consistent.
    let t = s.run_all(2, None).unwrap();
    assert_eq!(selected(&t.steps[1].output).len(), 7);
}
