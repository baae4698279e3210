//! Shared helpers for integration tests: a scripted loopback model stub and
//! paths to the shipped suites.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// Workspace-root relative path helpers (tests run from the crate dir).
pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root exists")
}

pub fn suite_dir(name: &str) -> PathBuf {
    workspace_root().join("suites").join(name)
}

pub fn pools_dir() -> PathBuf {
    workspace_root().join("pools")
}

/// One scripted reply, or a canned fallback computed from the prompt.
pub enum StubReply {
    /// HTTP 200 with a chat-completion body carrying this text.
    Completion(String),
    /// An arbitrary status with a plain body.
    Status(u16, String),
    /// Accept the connection and read the request, then stall until the
    /// client gives up.
    Hang,
}

type Responder = dyn Fn(&str) -> StubReply + Send + Sync;

/// A minimal single-threaded HTTP/1.1 stub standing in for a model endpoint.
/// Counts every request it serves.
pub struct StubServer {
    pub port: u16,
    hits: Arc<AtomicUsize>,
    script: Arc<Mutex<Vec<StubReply>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Start with a responder that maps the user prompt text to a reply.
    pub fn start(responder: Box<Responder>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        listener
            .set_nonblocking(true)
            .expect("nonblocking listener");
        let port = listener.local_addr().expect("local addr").port();
        let hits = Arc::new(AtomicUsize::new(0));
        let script: Arc<Mutex<Vec<StubReply>>> = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let thread_hits = Arc::clone(&hits);
        let thread_script = Arc::clone(&script);
        let thread_stop = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            while !thread_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        thread_hits.fetch_add(1, Ordering::SeqCst);
                        let reply = {
                            let mut script = thread_script.lock().expect("script lock");
                            if script.is_empty() {
                                None
                            } else {
                                Some(script.remove(0))
                            }
                        };
                        serve_one(stream, reply, &responder, &thread_stop);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(std::time::Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });

        StubServer {
            port,
            hits,
            script,
            stop,
            handle: Some(handle),
        }
    }

    /// Start with a fixed completion for every request.
    pub fn fixed(completion: &str) -> Self {
        let text = completion.to_string();
        Self::start(Box::new(move |_prompt| StubReply::Completion(text.clone())))
    }

    /// Queue scripted replies consumed before the responder is consulted.
    pub fn push_script(&self, replies: Vec<StubReply>) {
        self.script.lock().expect("script lock").extend(replies);
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn chat_url(&self) -> String {
        format!("http://127.0.0.1:{}/v1/chat/completions", self.port)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(
    mut stream: TcpStream,
    scripted: Option<StubReply>,
    responder: &Responder,
    stop: &AtomicBool,
) {
    let _ = stream.set_read_timeout(Some(std::time::Duration::from_secs(5)));
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).is_err() || line.trim_end().is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.trim_end().strip_prefix("content-length:") {
            content_length = rest.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        let _ = reader.read_exact(&mut body);
    }
    let prompt = serde_json::from_slice::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| {
            v.pointer("/messages/0/content")
                .or_else(|| v.pointer("/prompt"))
                .and_then(|p| p.as_str().map(str::to_string))
        })
        .unwrap_or_default();

    let reply = scripted.unwrap_or_else(|| responder(&prompt));
    match reply {
        StubReply::Completion(text) => {
            let body = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": text}}]
            })
            .to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
        }
        StubReply::Status(status, body) => {
            let _ = write!(
                stream,
                "HTTP/1.1 {} X\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                status,
                body.len(),
                body
            );
        }
        StubReply::Hang => {
            // Hold the socket open until the harness shuts down; the client's
            // request timeout fires first.
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(std::time::Duration::from_millis(20));
            }
        }
    }
}

/// The target question is the last `Q:` line of a rendered prompt.
pub fn target_question(prompt: &str) -> String {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Q: "))
        .unwrap_or(prompt)
        .to_string()
}

/// A responder that answers the shipped suite's questions correctly and
/// refuses anything else.
pub fn reference_answers() -> Box<Responder> {
    Box::new(|prompt| {
        let q = target_question(prompt);
        let answer = if q.contains("*.dat files in the current directory in ascending") {
            "ls -Sr *.dat"
        } else if q.contains("new file called data.dat") {
            "truncate -s 512k data.dat"
        } else if q.contains("count all of the directories") {
            "find ~ -type d | wc -l"
        } else if q.contains("prefix the line number") {
            "cat -n file.log"
        } else if q.contains("total number of lines in the *.c") {
            "find src -type f -name \"*.c\" -exec cat {} + | wc -l"
        } else if q.contains("date 90 days from today") {
            "date -d \"+90 days\" +%Y-%m-%d"
        } else if q.contains("timezone to America/New_York") {
            "export TZ=America/New_York"
        } else if q.contains("usernames of all users") {
            "cut -d: -f1 /etc/passwd"
        } else if q.contains("add a new user named karen") {
            "useradd karen"
        } else if q.contains("greatest common divisor of 48 and 36") {
            "a=48\nb=36\nwhile [ \"$b\" -ne 0 ]; do\n    t=$((a % b))\n    a=$b\n    b=$t\ndone\necho \"$a\""
        } else if q.contains("factorial of 6") {
            "n=6\nresult=1\nfor ((i = 2; i <= n; i++)); do\n    result=$((result * i))\ndone\necho \"$result\""
        } else if q.contains("directory called backup") {
            "mkdir -p backup\ncp *.log backup/"
        } else if q.contains("numbers from 1 to 5") {
            "1..5"
        } else if q.contains("HELLO in lowercase") {
            "\"HELLO\".ToLower()"
        } else {
            "I cannot help with that."
        };
        StubReply::Completion(answer.to_string())
    })
}
