//! The HTTP adapter against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use base64::Engine as _;
use serde_json::Value;

use textcot::backend::{BackendError, Client, HttpBackend, HttpConfig, ImagePayload, RetryPolicy};
use textcot::geometry::RasterImage;
use textcot::prompting::{AssembledPrompt, Stage};

struct Captured {
    authorization: Option<String>,
    body: Value,
}

/// Serve the given (status, body) replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Captured {
                authorization,
                body: serde_json::from_slice(&body).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), seen)
}

fn ok_reply(text: &str) -> (u16, String) {
    (200, serde_json::json!({"choices": [{"message": {"content": text}}]}).to_string())
}

fn client(endpoint: String, key_var: Option<&str>) -> Client {
    let backend = HttpBackend::new(HttpConfig {
        endpoint,
        api_key_env: key_var.map(str::to_string),
        model: "vision-test".into(),
        ..HttpConfig::default()
    })
    .unwrap();
    Client::new(Arc::new(backend)).with_retry(RetryPolicy {
        max_retries: 2,
        base_delay_ms: 1,
    })
}

fn payload() -> ImagePayload {
    ImagePayload::from_rgb(&RasterImage::from_pixel(3, 2, image::Rgb([10, 20, 30])))
}

fn prompt(text: &str) -> AssembledPrompt {
    AssembledPrompt {
        stage: Stage::BaselineDirect,
        text: text.into(),
    }
}

#[test]
fn sends_text_and_png_and_reads_the_reply() {
    std::env::set_var("TEXTCOT_WIRE_TEST_KEY", "sekret");
    let (endpoint, seen) = serve(vec![ok_reply("It says OPEN.")]);
    let client = client(endpoint, Some("TEXTCOT_WIRE_TEST_KEY"));
    let image = payload();
    let mut params = client.greedy_params();
    params.seed = Some(9);
    let req = client.request(&image, prompt("What does the sign say?"), params);
    let resp = client.generate(&req).unwrap();
    assert_eq!(resp.text, "It says OPEN.");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let c = &seen[0];
    assert_eq!(c.authorization.as_deref(), Some("Bearer sekret"));
    assert_eq!(c.body["model"], "vision-test");
    assert_eq!(c.body["temperature"], 0.0);
    assert_eq!(c.body["max_tokens"], 512);
    assert_eq!(c.body["seed"], 9);
    let content = &c.body["messages"][0]["content"];
    assert_eq!(content[0]["text"], "What does the sign say?");
    let url = content[1]["image_url"]["url"].as_str().unwrap();
    let data = url.strip_prefix("data:image/png;base64,").unwrap();
    let png = base64::engine::general_purpose::STANDARD.decode(data).unwrap();
    assert_eq!(png, image.png());
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (endpoint, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), ok_reply("fine")]);
    let client = client(endpoint, None);
    let req = client.request(&payload(), prompt("q"), client.greedy_params());
    assert_eq!(client.generate(&req).unwrap().text, "fine");
    assert_eq!(client.counters().backend_calls, 3);
    assert!(seen.lock().unwrap()[0].authorization.is_none());
}

#[test]
fn gives_up_after_the_retry_budget() {
    let (endpoint, _) = serve(vec![(500, "a".into()), (502, "b".into()), (504, "c".into())]);
    let client = client(endpoint, None);
    let req = client.request(&payload(), prompt("q"), client.greedy_params());
    match client.generate(&req) {
        Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn client_errors_are_refusals_without_retry() {
    let (endpoint, _) = serve(vec![(400, "{\"error\":\"bad image\"}".into())]);
    let client = client(endpoint, None);
    let req = client.request(&payload(), prompt("q"), client.greedy_params());
    match client.generate(&req) {
        Err(BackendError::Refusal { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("bad image"));
        }
        other => panic!("expected refusal, got {other:?}"),
    }
    assert_eq!(client.counters().backend_calls, 1);
}

#[test]
fn malformed_success_body_is_reported() {
    let (endpoint, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    let client = client(endpoint, None);
    let req = client.request(&payload(), prompt("q"), client.greedy_params());
    assert!(matches!(client.generate(&req), Err(BackendError::Malformed(_))));
}
