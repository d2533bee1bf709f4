//! RemoteBackend against a throwaway HTTP/1.1 server on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::NaiveDate;
use loadpatch_core::backend::{
    Backend, FineTuneRequest, Hyperparams, JobStatus, PollPolicy, RemoteBackend, RetryPolicy, Stage,
};
use loadpatch_core::preprocess::{apply_mask, MaskSpec, QuantizedDay};
use loadpatch_core::promptset::{build_test_prompt, build_training_sample, write_dataset};
use loadpatch_core::{Error, MaskedDay, PromptVariant};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

struct Reply {
    status: u16,
    body: String,
    headers: Vec<(&'static str, String)>,
}

fn reply(status: u16, body: &str) -> Reply {
    Reply {
        status,
        body: body.to_string(),
        headers: Vec::new(),
    }
}

fn read_request(stream: &mut impl Read) -> Option<Seen> {
    let mut r = BufReader::new(stream);
    let mut line = String::new();
    r.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        r.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |name: &str| {
        headers
            .iter()
            .find(|(k, _): &&(String, String)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.clone())
    };
    let mut body = Vec::new();
    if let Some(n) = get("content-length") {
        body.resize(n.parse().ok()?, 0);
        r.read_exact(&mut body).ok()?;
    } else if get("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
        loop {
            let mut size = String::new();
            r.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0; n + 2];
            r.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    }
    Some(Seen {
        method,
        path,
        headers,
        body,
    })
}

/// Serves `handler` until the test process exits; returns the base URL and
/// the log of received requests.
fn serve<F>(handler: F) -> (String, Arc<Mutex<Vec<Seen>>>)
where
    F: Fn(&Seen, usize) -> Reply + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let log2 = Arc::clone(&log);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else { continue };
            let n = {
                let mut l = log2.lock().unwrap();
                l.push(req.clone());
                l.len()
            };
            let rep = handler(&req, n);
            let mut head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                rep.status,
                rep.body.len()
            );
            for (k, v) in &rep.headers {
                head.push_str(&format!("{k}: {v}\r\n"));
            }
            head.push_str("\r\n");
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(rep.body.as_bytes());
        }
    });
    (format!("http://{addr}/v1"), log)
}

fn client(base: &str) -> RemoteBackend {
    let mut c = RemoteBackend::new(base, "sk-test", "gpt-3.5-turbo").unwrap();
    c.retry = RetryPolicy {
        max_attempts: 5,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(5),
    };
    c.poll = PollPolicy {
        initial: Duration::from_millis(1),
        max_interval: Duration::from_millis(4),
        timeout: Duration::from_secs(5),
    };
    c
}

fn day(start: usize) -> MaskedDay {
    let q = QuantizedDay {
        user_id: "user0".into(),
        date: NaiveDate::from_ymd_opt(2018, 7, 1).unwrap(),
        load_q: (0..96).map(|i| (i + 10) as u8).collect(),
        temp_q: vec![100; 96],
        load_kw: vec![400.0; 96],
    };
    apply_mask(&q, MaskSpec::new(start).unwrap()).unwrap()
}

#[test]
fn chat_completion_round_trip() {
    let (base, log) = serve(|_, _| {
        reply(200, r#"{"choices":[{"message":{"role":"assistant","content":"LLLLL MMMMM"}}]}"#)
    });
    let prompt = build_test_prompt(&day(5), PromptVariant::default()).unwrap();
    let text = client(&base).chat_complete("ft:model", &prompt).unwrap();
    assert_eq!(text, "LLLLL MMMMM");
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].method, "POST");
    assert_eq!(log[0].path, "/v1/chat/completions");
    assert_eq!(log[0].header("authorization"), Some("Bearer sk-test"));
    let body: serde_json::Value = serde_json::from_slice(&log[0].body).unwrap();
    assert_eq!(body["model"], "ft:model");
    assert_eq!(body["messages"].as_array().unwrap().len(), 3);
    assert!(body.get("variant").is_none());
}

#[test]
fn rate_limits_are_retried_with_hint() {
    let (base, log) = serve(|_, n| {
        if n < 3 {
            Reply {
                status: 429,
                body: r#"{"error":{"message":"slow down"}}"#.into(),
                headers: vec![("Retry-After", "0".into())],
            }
        } else {
            reply(200, r#"{"choices":[{"message":{"content":"ok"}}]}"#)
        }
    });
    let prompt = build_test_prompt(&day(5), PromptVariant::default()).unwrap();
    assert_eq!(client(&base).chat_complete("m", &prompt).unwrap(), "ok");
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn persistent_server_errors_surface_after_five_attempts() {
    let (base, log) = serve(|_, _| reply(503, r#"{"error":{"message":"overloaded"}}"#));
    let prompt = build_test_prompt(&day(5), PromptVariant::default()).unwrap();
    match client(&base).chat_complete("m", &prompt) {
        Err(Error::Provider { status, message }) => {
            assert_eq!(status, Some(503));
            assert_eq!(message, "overloaded");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(log.lock().unwrap().len(), 5);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, log) = serve(|_, _| reply(400, r#"{"error":{"message":"bad model"}}"#));
    let prompt = build_test_prompt(&day(5), PromptVariant::default()).unwrap();
    let err = client(&base).chat_complete("m", &prompt).unwrap_err();
    assert!(err.to_string().contains("bad model"), "{err}");
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn refused_connection_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let prompt = build_test_prompt(&day(5), PromptVariant::default()).unwrap();
    let err = client(&format!("http://127.0.0.1:{port}/v1"))
        .chat_complete("m", &prompt)
        .unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

#[test]
fn finetune_uploads_creates_and_polls() {
    let (base, log) = serve(|req, _| match (req.method.as_str(), req.path.as_str()) {
        ("POST", "/v1/files") => reply(200, r#"{"id":"file-abc"}"#),
        ("POST", "/v1/fine_tuning/jobs") => reply(200, r#"{"id":"ftjob-1","status":"validating_files"}"#),
        ("GET", "/v1/fine_tuning/jobs/ftjob-1") => {
            static POLLS: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
            if POLLS.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 2 {
                reply(200, r#"{"id":"ftjob-1","status":"running"}"#)
            } else {
                reply(
                    200,
                    r#"{"id":"ftjob-1","status":"succeeded","fine_tuned_model":"ft:gpt:x","trained_tokens":12345}"#,
                )
            }
        }
        _ => reply(404, r#"{"error":{"message":"no route"}}"#),
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let samples: Vec<_> = (0..3)
        .map(|i| build_training_sample(&day(i * 20), PromptVariant::default()).unwrap())
        .collect();
    write_dataset(&samples, &path).unwrap();
    let hp = Hyperparams {
        n_epochs: Some(3),
        ..Hyperparams::default()
    };
    let job = client(&base)
        .submit_finetune(&FineTuneRequest {
            stage: Stage::Stage1,
            base_model_id: "gpt-3.5-turbo",
            dataset_path: &path,
            hyperparams: &hp,
        })
        .unwrap();
    assert_eq!(job.job_id, "ftjob-1");
    assert_eq!(job.status, JobStatus::Succeeded);
    assert_eq!(job.result_model_id.as_deref(), Some("ft:gpt:x"));
    assert_eq!(job.trained_tokens, Some(12345));
    assert_eq!(job.n_samples, 3);

    let log = log.lock().unwrap();
    let paths: Vec<&str> = log.iter().map(|s| s.path.as_str()).collect();
    assert_eq!(paths[..2], ["/v1/files", "/v1/fine_tuning/jobs"]);
    assert_eq!(paths.len(), 5);
    let upload = String::from_utf8_lossy(&log[0].body);
    assert!(upload.contains("fine-tune"));
    assert!(upload.contains(r#"{"messages":["#));
    assert!(!upload.contains("day_ref"));
    let create: serde_json::Value = serde_json::from_slice(&log[1].body).unwrap();
    assert_eq!(create["training_file"], "file-abc");
    assert_eq!(create["hyperparameters"]["n_epochs"], 3);
    assert!(create["hyperparameters"].get("batch_size").is_none());
}

#[test]
fn failed_job_has_no_model() {
    let (base, _) = serve(|req, _| match req.path.as_str() {
        "/v1/files" => reply(200, r#"{"id":"file-1"}"#),
        _ => reply(200, r#"{"id":"ftjob-2","status":"failed","error":{"message":"bad file"}}"#),
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_dataset(&[build_training_sample(&day(0), PromptVariant::default()).unwrap()], &path).unwrap();
    let job = client(&base)
        .submit_finetune(&FineTuneRequest {
            stage: Stage::Stage2,
            base_model_id: "ft:base",
            dataset_path: &path,
            hyperparams: &Hyperparams::default(),
        })
        .unwrap();
    assert_eq!(job.status, JobStatus::Failed);
    assert_eq!(job.result_model_id, None);
    assert_eq!(job.error.as_deref(), Some("bad file"));
    assert!(job.model_id().is_err());
}

#[test]
fn invalid_dataset_sends_nothing() {
    let (base, log) = serve(|_, _| reply(200, "{}"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    write_dataset(&[build_test_prompt(&day(0), PromptVariant::default()).unwrap()], &path).unwrap();
    let err = client(&base)
        .submit_finetune(&FineTuneRequest {
            stage: Stage::Stage1,
            base_model_id: "gpt-3.5-turbo",
            dataset_path: &path,
            hyperparams: &Hyperparams::default(),
        })
        .unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    thread::sleep(Duration::from_millis(20));
    assert!(log.lock().unwrap().is_empty());
}
