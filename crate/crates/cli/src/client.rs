//! Blocking HTTP client for the service API.

use std::time::{Duration, Instant};

use reqwest::blocking::{multipart, Client as Http, RequestBuilder, Response};
use reqwest::{Method, Url};
use serde_json::Value;

use crate::config::CliConfig;
use crate::error::{CliError, CliResult, ExitKind};

pub const TOKEN_HEADER: &str = "x-trinity-token";

pub struct Client {
    http: Http,
    base: Url,
    token: Option<String>,
}

fn transport(e: reqwest::Error) -> CliError {
    if e.is_connect() || e.is_timeout() || e.is_request() {
        CliError::connectivity(format!("cannot reach the server: {e}"))
    } else {
        CliError::server(format!("bad response: {e}"))
    }
}

/// Maps a non-2xx answer to an error carrying the server's code and message.
fn check(resp: Response) -> CliResult<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let kind = if status.is_server_error() { ExitKind::Server } else { ExitKind::Validation };
    let text = resp.text().unwrap_or_default();
    let (code, message) = match serde_json::from_str::<Value>(&text) {
        Ok(v) => (
            v["error_code"].as_str().map(str::to_string),
            v["message"].as_str().map(str::to_string).unwrap_or(text.clone()),
        ),
        Err(_) => (None, if text.is_empty() { status.to_string() } else { text }),
    };
    Err(CliError { kind, code, message })
}

impl Client {
    pub fn new(cfg: &CliConfig) -> CliResult<Self> {
        let http = Http::builder()
            .timeout(Duration::from_secs(3600))
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| CliError::validation(format!("http client: {e}")))?;
        Ok(Client { http, base: cfg.server_url.clone(), token: cfg.token.clone() })
    }

    fn request(&self, method: Method, path: &str) -> CliResult<RequestBuilder> {
        let url = self.base.join(path).map_err(|e| CliError::validation(format!("bad path {path}: {e}")))?;
        let mut rb = self.http.request(method, url);
        if let Some(t) = &self.token {
            rb = rb.header(TOKEN_HEADER, t);
        }
        Ok(rb)
    }

    fn send(&self, rb: RequestBuilder) -> CliResult<Response> {
        check(rb.send().map_err(transport)?)
    }

    fn json_of(resp: Response) -> CliResult<Value> {
        resp.json().map_err(|e| CliError::server(format!("response is not JSON: {e}")))
    }

    pub fn get(&self, path: &str) -> CliResult<Value> {
        Self::json_of(self.send(self.request(Method::GET, path)?)?)
    }

    pub fn get_text(&self, path: &str) -> CliResult<String> {
        self.send(self.request(Method::GET, path)?)?.text().map_err(transport)
    }

    pub fn get_bytes(&self, path: &str) -> CliResult<Vec<u8>> {
        Ok(self.send(self.request(Method::GET, path)?)?.bytes().map_err(transport)?.to_vec())
    }

    pub fn post(&self, path: &str, body: &Value) -> CliResult<Value> {
        Self::json_of(self.send(self.request(Method::POST, path)?.json(body))?)
    }

    pub fn patch(&self, path: &str, body: &Value) -> CliResult<Value> {
        Self::json_of(self.send(self.request(Method::PATCH, path)?.json(body))?)
    }

    pub fn post_form(&self, path: &str, fields: Vec<(&'static str, String)>) -> CliResult<Value> {
        let mut form = multipart::Form::new();
        for (k, v) in fields {
            form = form.text(k, v);
        }
        Self::json_of(self.send(self.request(Method::POST, path)?.multipart(form))?)
    }

    /// Polls a job until it leaves QUEUED/RUNNING; a failed job is a
    /// server-side failure.
    pub fn wait_job(&self, job_id: &str, progress: impl Fn(&Value)) -> CliResult<Value> {
        let start = Instant::now();
        let mut last_status = String::new();
        loop {
            let job = self.get(&format!("/api/jobs/{job_id}"))?;
            let status = job["status"].as_str().unwrap_or_default().to_string();
            if status != last_status {
                progress(&job);
                last_status = status.clone();
            }
            match status.as_str() {
                "SUCCEEDED" => return Ok(job),
                "FAILED" => {
                    let msg = job["error"].as_str().unwrap_or("no reason given");
                    return Err(CliError { kind: ExitKind::Server, code: Some("job_failed".into()), message: format!("job {job_id} failed: {msg}") });
                }
                _ => {}
            }
            let pause = if start.elapsed() < Duration::from_secs(5) { 100 } else { 500 };
            std::thread::sleep(Duration::from_millis(pause));
        }
    }
}
