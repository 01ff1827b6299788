//! Line-delimited JSON wire protocol for pluggable models.
//!
//! Requests are single-line JSON objects with an `id` echo field and a
//! `type` of `log_prob`, `adapt`, or `sample`. Adaptation returns a model
//! handle that later requests reference; `"base"` addresses the unadapted
//! model. Errors come back as `{"id": ..., "error": code}` and the stream
//! stays alive. The built-in transition model is served through the same
//! protocol so remote and in-process behavior can be compared directly.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use crate::chain::LogicalChain;
use crate::model::{AdaptConfig, AdaptOutcome, AdaptableModel, ModelError, TraceSample};

/// Handle addressing the unadapted base model.
pub const BASE_HANDLE: &str = "base";

/// Serves one connection: reads requests line by line until EOF, writing one
/// response line per request. Adapted models accumulate under fresh handles
/// for the lifetime of the connection.
pub fn serve_connection<R: BufRead, W: Write>(
    base: &dyn AdaptableModel,
    reader: R,
    mut writer: W,
) -> std::io::Result<()> {
    let mut adapted: HashMap<String, Box<dyn AdaptableModel>> = HashMap::new();
    let mut next_handle = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_line(base, &mut adapted, &mut next_handle, &line);
        writer.write_all(response.to_string().as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

fn handle_line(
    base: &dyn AdaptableModel,
    adapted: &mut HashMap<String, Box<dyn AdaptableModel>>,
    next_handle: &mut usize,
    line: &str,
) -> Value {
    let Ok(request) = serde_json::from_str::<Value>(line) else {
        return json!({"id": null, "error": "malformed"});
    };
    let id = request.get("id").cloned().unwrap_or(Value::Null);
    let Some(kind) = request.get("type").and_then(Value::as_str) else {
        return json!({"id": id, "error": "unknown_type"});
    };
    let result = match kind {
        "log_prob" => handle_log_prob(base, adapted, &request),
        "adapt" => handle_adapt(base, adapted, next_handle, &request),
        "sample" => handle_sample(base, adapted, &request),
        _ => Err(("unknown_type".to_string(), None)),
    };
    match result {
        Ok(mut body) => {
            body["id"] = id;
            body
        }
        Err((code, message)) => {
            let mut response = json!({"id": id, "error": code});
            if let Some(message) = message {
                response["message"] = Value::String(message);
            }
            response
        }
    }
}

type HandlerResult = Result<Value, (String, Option<String>)>;

fn bad_request(message: impl Into<String>) -> (String, Option<String>) {
    ("bad_request".to_string(), Some(message.into()))
}

fn model_error(err: ModelError) -> (String, Option<String>) {
    ("model_error".to_string(), Some(err.to_string()))
}

fn select_model<'a>(
    base: &'a dyn AdaptableModel,
    adapted: &'a HashMap<String, Box<dyn AdaptableModel>>,
    request: &Value,
) -> Result<&'a dyn AdaptableModel, (String, Option<String>)> {
    match request.get("model").and_then(Value::as_str) {
        None | Some(BASE_HANDLE) => Ok(base),
        Some(handle) => adapted
            .get(handle)
            .map(|m| m.as_ref())
            .ok_or_else(|| bad_request(format!("unknown model handle {handle:?}"))),
    }
}

fn chain_from(request: &Value, field: &str) -> Result<LogicalChain, (String, Option<String>)> {
    let value = request
        .get(field)
        .ok_or_else(|| bad_request(format!("missing field {field:?}")))?;
    serde_json::from_value::<Vec<String>>(value.clone())
        .map_err(|e| bad_request(e.to_string()))
        .and_then(|states| LogicalChain::new(states).map_err(|e| bad_request(e.to_string())))
}

fn string_field<'a>(request: &'a Value, field: &str) -> Result<&'a str, (String, Option<String>)> {
    request
        .get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| bad_request(format!("missing field {field:?}")))
}

fn adapt_config_from(request: &Value) -> AdaptConfig {
    let defaults = AdaptConfig::default();
    AdaptConfig {
        steps: request
            .get("steps")
            .and_then(Value::as_u64)
            .map_or(defaults.steps, |v| v as usize),
        eta: request
            .get("eta")
            .and_then(Value::as_f64)
            .unwrap_or(defaults.eta),
        max_states: request
            .get("max_states")
            .and_then(Value::as_u64)
            .map_or(defaults.max_states, |v| v as usize),
    }
}

fn handle_log_prob(
    base: &dyn AdaptableModel,
    adapted: &HashMap<String, Box<dyn AdaptableModel>>,
    request: &Value,
) -> HandlerResult {
    let model = select_model(base, adapted, request)?;
    let question = string_field(request, "question")?;
    let context = request.get("context").and_then(Value::as_str);
    let chain = chain_from(request, "chain")?;
    let log_prob = model
        .log_prob(question, context, &chain)
        .map_err(model_error)?;
    Ok(json!({"log_prob": log_prob}))
}

fn handle_adapt(
    base: &dyn AdaptableModel,
    adapted: &mut HashMap<String, Box<dyn AdaptableModel>>,
    next_handle: &mut usize,
    request: &Value,
) -> HandlerResult {
    let source = select_model(base, adapted, request)?;
    let batch_value = request
        .get("batch")
        .ok_or_else(|| bad_request("missing field \"batch\""))?;
    let batch: Vec<TraceSample> =
        serde_json::from_value(batch_value.clone()).map_err(|e| bad_request(e.to_string()))?;
    let config = adapt_config_from(request);
    let AdaptOutcome { model, loss_trace } = source.adapt(&batch, &config).map_err(model_error)?;
    *next_handle += 1;
    let handle = format!("m{next_handle}");
    adapted.insert(handle.clone(), model);
    Ok(json!({"model": handle, "loss_trace": loss_trace}))
}

fn handle_sample(
    base: &dyn AdaptableModel,
    adapted: &HashMap<String, Box<dyn AdaptableModel>>,
    request: &Value,
) -> HandlerResult {
    let model = select_model(base, adapted, request)?;
    let question = string_field(request, "question")?;
    let context = request.get("context").and_then(Value::as_str);
    let config = adapt_config_from(request);
    let chain = model
        .sample(question, context, &config)
        .map_err(model_error)?;
    Ok(json!({"chain": chain.states()}))
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

/// Client side of the protocol, implementing [`AdaptableModel`] over a TCP
/// stream. Requests on a connection are serialized; adapted handles share
/// the underlying connection.
pub struct RemoteModel {
    connection: Arc<Mutex<Connection>>,
    handle: String,
}

impl RemoteModel {
    pub fn connect(addr: impl std::net::ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            connection: Arc::new(Mutex::new(Connection {
                reader,
                writer: stream,
                next_id: 0,
            })),
            handle: BASE_HANDLE.to_string(),
        })
    }

    pub fn handle(&self) -> &str {
        &self.handle
    }

    fn call(&self, mut request: Value) -> Result<Value, ModelError> {
        let mut conn = self
            .connection
            .lock()
            .map_err(|_| ModelError::Remote("connection poisoned".into()))?;
        conn.next_id += 1;
        let id = conn.next_id;
        request["id"] = json!(id);
        request["model"] = Value::String(self.handle.clone());
        let mut line = request.to_string();
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .map_err(|e| ModelError::Remote(e.to_string()))?;
        let mut response_line = String::new();
        conn.reader
            .read_line(&mut response_line)
            .map_err(|e| ModelError::Remote(e.to_string()))?;
        if response_line.is_empty() {
            return Err(ModelError::Remote("connection closed".into()));
        }
        let response: Value = serde_json::from_str(&response_line)
            .map_err(|e| ModelError::Remote(format!("bad response: {e}")))?;
        if response.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(ModelError::Remote("response id mismatch".into()));
        }
        if let Some(code) = response.get("error").and_then(Value::as_str) {
            let message = response
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or(code);
            return Err(ModelError::Remote(format!("{code}: {message}")));
        }
        Ok(response)
    }
}

impl AdaptableModel for RemoteModel {
    fn log_prob(
        &self,
        question: &str,
        context: Option<&str>,
        chain: &LogicalChain,
    ) -> Result<f64, ModelError> {
        let response = self.call(json!({
            "type": "log_prob",
            "question": question,
            "context": context,
            "chain": chain.states(),
        }))?;
        response
            .get("log_prob")
            .and_then(Value::as_f64)
            .ok_or_else(|| ModelError::Remote("missing log_prob in response".into()))
    }

    fn adapt(
        &self,
        batch: &[TraceSample],
        config: &AdaptConfig,
    ) -> Result<AdaptOutcome, ModelError> {
        let response = self.call(json!({
            "type": "adapt",
            "batch": batch,
            "steps": config.steps,
            "eta": config.eta,
            "max_states": config.max_states,
        }))?;
        let handle = response
            .get("model")
            .and_then(Value::as_str)
            .ok_or_else(|| ModelError::Remote("missing model handle".into()))?
            .to_string();
        let loss_trace: Vec<f64> = response
            .get("loss_trace")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| ModelError::Remote("missing loss_trace".into()))?;
        Ok(AdaptOutcome {
            model: Box::new(RemoteModel {
                connection: Arc::clone(&self.connection),
                handle,
            }),
            loss_trace,
        })
    }

    fn sample(
        &self,
        question: &str,
        context: Option<&str>,
        config: &AdaptConfig,
    ) -> Result<LogicalChain, ModelError> {
        let response = self.call(json!({
            "type": "sample",
            "question": question,
            "context": context,
            "max_states": config.max_states,
        }))?;
        let states: Vec<String> = response
            .get("chain")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| ModelError::Remote("missing chain in response".into()))?;
        LogicalChain::new(states).map_err(|e| ModelError::Remote(e.to_string()))
    }
}
