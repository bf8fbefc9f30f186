mod support;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use promptor::backend::{
    BackendDescriptor, BackendError, Embedder, GenerationRequest, Generator, HashEmbedder, HttpEmbedder, HttpGenerator,
    API_KEY_ENV,
};
use promptor::orchestrator::{ExecutionFailure, Orchestrator, PipelineConfig};
use promptor::plan::{InteractionTemplate, Plan, Subtask, SubtaskStatus};
use promptor::prompt::{IoSpec, ModularPrompt};
use promptor::trace::{EventKind, TraceSink};
use support::{chat_reply, json_string, Stub};

fn descriptor(stub: &Stub) -> BackendDescriptor {
    BackendDescriptor {
        max_retries: 0,
        retry_backoff_ms: 1,
        timeout_ms: 5_000,
        ..BackendDescriptor::http(stub.url(), "stub-model")
    }
}

fn expected_chat_body(model: &str, prompt: &str, temperature: f64, n: u32, max_tokens: u32) -> String {
    format!(
        "{{\"model\":{},\"messages\":[{{\"role\":\"user\",\"content\":{}}}],\"temperature\":{temperature:?},\"n\":{n},\"max_tokens\":{max_tokens}}}",
        json_string(model),
        json_string(prompt)
    )
}

#[test]
fn chat_request_is_bit_exact_and_reply_passes_through() {
    std::env::set_var(API_KEY_ENV, "sk-test");
    let stub = Stub::start(Duration::ZERO, |_, _| (200, chat_reply(&["canned one", "canned two"])));
    let generator = HttpGenerator::new(descriptor(&stub)).unwrap();
    let prompt = "# Role\nYou are \"careful\".\n\n## Requirements\n1. Tab\there.\n";
    let request = GenerationRequest { prompt_text: prompt.into(), temperature: 0.7, sample_count: 2, max_tokens: 256 };
    let out = generator.generate(&request).unwrap();
    assert_eq!(out, vec!["canned one", "canned two"]);

    let reqs = stub.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].method, "POST");
    assert_eq!(reqs[0].path, "/v1/chat/completions");
    assert_eq!(reqs[0].header("content-type"), Some("application/json"));
    assert_eq!(reqs[0].header("authorization"), Some("Bearer sk-test"));
    assert_eq!(reqs[0].body_text(), expected_chat_body("stub-model", prompt, 0.7, 2, 256));
    assert!(reqs[0].body_text().contains(&json_string(prompt)));
}

#[test]
fn short_replies_are_topped_up() {
    let stub = Stub::start(Duration::ZERO, |_, _| (200, chat_reply(&["x"])));
    let generator = HttpGenerator::new(descriptor(&stub)).unwrap();
    let request = GenerationRequest { prompt_text: "p".into(), temperature: 1.0, sample_count: 3, max_tokens: 8 };
    assert_eq!(generator.generate(&request).unwrap().len(), 3);
    let ns: Vec<String> = stub.requests().iter().map(|r| r.body_text().to_string()).collect();
    assert_eq!(ns, [3, 2, 1].map(|n| expected_chat_body("stub-model", "p", 1.0, n, 8)).to_vec());
}

#[test]
fn embedding_request_is_bit_exact() {
    let stub = Stub::start(Duration::ZERO, |_, _| {
        (200, r#"{"data": [{"index": 0, "embedding": [1.0, 0.0]}, {"index": 1, "embedding": [0.0, 2.5]}]}"#.into())
    });
    let embedder = HttpEmbedder::new(descriptor(&stub)).unwrap();
    let texts = vec!["first \"one\"".to_string(), "second".to_string()];
    let vectors = embedder.embed(&texts).unwrap();
    assert_eq!(vectors.len(), 2);
    assert_eq!(vectors[1].components(), &[0.0, 2.5]);
    let reqs = stub.requests();
    assert_eq!(reqs[0].path, "/v1/embeddings");
    assert_eq!(
        reqs[0].body_text(),
        format!("{{\"model\":\"stub-model\",\"input\":[{},{}]}}", json_string(&texts[0]), json_string(&texts[1]))
    );
}

#[test]
fn concurrent_requests_never_exceed_max_inflight() {
    for max_inflight in [1u32, 2, 3] {
        let stub = Stub::start(Duration::from_millis(40), |_, _| (200, chat_reply(&["ok"])));
        let generator = Arc::new(HttpGenerator::new(BackendDescriptor { max_inflight, ..descriptor(&stub) }).unwrap());
        let workers: Vec<_> = (0..8)
            .map(|i| {
                let g = Arc::clone(&generator);
                thread::spawn(move || g.generate(&GenerationRequest::new(format!("prompt {i}"), 1.0, 1)).unwrap())
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        assert_eq!(stub.requests().len(), 8);
        assert_eq!(stub.peak_inflight(), max_inflight as usize);
    }
}

#[test]
fn persistent_failure_surfaces_one_transport_error_after_all_attempts() {
    for max_retries in [0u32, 1, 3] {
        let stub = Stub::start(Duration::ZERO, |_, _| (503, "{}".into()));
        let generator = HttpGenerator::new(BackendDescriptor { max_retries, ..descriptor(&stub) }).unwrap();
        let err = generator.generate(&GenerationRequest::new("p", 1.0, 1)).unwrap_err();
        match err {
            BackendError::Transport { attempts, .. } => assert_eq!(attempts, max_retries + 1),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(stub.requests().len(), max_retries as usize + 1);
    }
}

#[test]
fn transient_failures_are_retried_then_succeed() {
    let stub =
        Stub::start(Duration::ZERO, |i, _| if i < 2 { (500, "{}".into()) } else { (200, chat_reply(&["late"])) });
    let generator = HttpGenerator::new(BackendDescriptor { max_retries: 2, ..descriptor(&stub) }).unwrap();
    assert_eq!(generator.generate(&GenerationRequest::new("p", 1.0, 1)).unwrap(), vec!["late"]);
    assert_eq!(stub.requests().len(), 3);
    let bodies: Vec<_> = stub.requests().iter().map(|r| r.body.clone()).collect();
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(Duration::ZERO, |_, _| (400, r#"{"error": "bad"}"#.into()));
    let generator = HttpGenerator::new(BackendDescriptor { max_retries: 3, ..descriptor(&stub) }).unwrap();
    let err = generator.generate(&GenerationRequest::new("p", 1.0, 1)).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }));
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn execution_against_a_failing_backend_records_a_transport_failure() {
    let stub = Stub::start(Duration::ZERO, |_, _| (502, "{}".into()));
    let generator = HttpGenerator::new(BackendDescriptor { max_retries: 2, ..descriptor(&stub) }).unwrap();
    let cfg = PipelineConfig::new("Count the rows.");
    let sink = TraceSink::new();
    let orch = Orchestrator::new(&cfg, &generator, &HashEmbedder, &sink);
    let mut plan = Plan::new(
        "Count the rows.",
        vec![Subtask::new("s1", "Count the rows.")],
        InteractionTemplate::LinearChain,
        "test",
    )
    .unwrap();
    let prompt = ModularPrompt::new("Counter.", vec!["Count the rows.".into()], "", "", IoSpec::default()).unwrap();
    orch.set_status(&mut plan, "s1", SubtaskStatus::StablePromptReady).unwrap();
    let result = orch.execute_subtask(&mut plan, "s1", &prompt, 0).unwrap();
    assert!(matches!(result.failure, Some(ExecutionFailure::Transport { attempts: 3, .. })));
    assert_eq!(result.output, None);
    assert_eq!(plan.get("s1").unwrap().status, SubtaskStatus::ExecutedFailed);
    assert_eq!(stub.requests().len(), 3);
    let events = sink.events();
    assert!(events
        .iter()
        .any(|e| matches!(&e.event, EventKind::Execution { failure: Some(ExecutionFailure::Transport { .. }), .. })));
}
