//! WebSocket chat service: one agent per connection over a shared engine.
//!
//! Each connection gets its own conversation. A text frame runs one round
//! and produces exactly one reply frame; connections never share history,
//! and a slow round on one connection does not delay the others. This is the
//! demonstration that engines are safely shareable across concurrent
//! conversations.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{close_code, CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::any;
use axum::Router;

use crab::{Agent, AgentConfig, Engine, RoundEvent};

use crate::repl::RoundMode;

/// Produces the engine a new connection's agent will use. A shared service
/// engine is the normal case; tests hand every connection its own scripted
/// engine.
pub type EngineProvider = Arc<dyn Fn() -> Arc<dyn Engine> + Send + Sync>;

/// Provider that hands every connection the same engine instance.
pub fn shared_engine(engine: Arc<dyn Engine>) -> EngineProvider {
    Arc::new(move || engine.clone())
}

#[derive(Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub engine_provider: EngineProvider,
    pub system_prompt: Option<String>,
    pub mode: RoundMode,
    pub max_connections: usize,
    pub idle_timeout: Duration,
    /// How long shutdown waits for in-flight rounds to drain.
    pub shutdown_grace: Duration,
}

impl ServiceConfig {
    pub fn new(bind: SocketAddr, engine_provider: EngineProvider) -> Self {
        Self {
            bind,
            engine_provider,
            system_prompt: None,
            mode: RoundMode::Chat,
            max_connections: 64,
            idle_timeout: Duration::from_secs(300),
            shutdown_grace: Duration::from_secs(5),
        }
    }
}

struct ServiceState {
    provider: EngineProvider,
    system_prompt: Option<String>,
    mode: RoundMode,
    idle_timeout: Duration,
    permits: Arc<tokio::sync::Semaphore>,
}

/// A bound but not yet running service; lets callers learn the actual
/// address before serving (useful with port 0).
pub struct ChatService {
    listener: tokio::net::TcpListener,
    state: Arc<ServiceState>,
    shutdown_grace: Duration,
}

impl ChatService {
    pub async fn bind(config: ServiceConfig) -> io::Result<Self> {
        let listener = tokio::net::TcpListener::bind(config.bind).await?;
        Ok(Self {
            listener,
            state: Arc::new(ServiceState {
                provider: config.engine_provider,
                system_prompt: config.system_prompt,
                mode: config.mode,
                idle_timeout: config.idle_timeout,
                permits: Arc::new(tokio::sync::Semaphore::new(config.max_connections)),
            }),
            shutdown_grace: config.shutdown_grace,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves, then drains in-flight rounds up to
    /// the configured grace period.
    pub async fn serve<F>(self, shutdown: F) -> io::Result<()>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let app = Router::new()
            .route("/chat", any(ws_handler))
            .with_state(self.state);
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let mut server = tokio::spawn(async move {
            axum::serve(self.listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        });
        shutdown.await;
        let _ = tx.send(());
        match tokio::time::timeout(self.shutdown_grace, &mut server).await {
            Ok(joined) => joined.map_err(io::Error::other)?,
            Err(_) => {
                server.abort();
                Ok(())
            }
        }
    }
}

async fn ws_handler(
    State(state): State<Arc<ServiceState>>,
    upgrade: WebSocketUpgrade,
) -> Response {
    let Ok(permit) = state.permits.clone().try_acquire_owned() else {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    };
    upgrade.on_upgrade(move |socket| async move {
        let _permit = permit;
        handle_connection(socket, state).await;
    })
}

async fn close_with(ws: &mut WebSocket, code: u16, reason: &str) {
    let _ = ws
        .send(Message::Close(Some(CloseFrame {
            code,
            reason: reason.to_string().into(),
        })))
        .await;
}

async fn handle_connection(mut ws: WebSocket, state: Arc<ServiceState>) {
    let engine = (state.provider)();
    let config = AgentConfig {
        system_prompt: state.system_prompt.clone(),
        ..AgentConfig::default()
    };
    let mut agent = match Agent::new(engine, config) {
        Ok(agent) => agent,
        Err(_) => {
            close_with(&mut ws, close_code::ERROR, "agent configuration rejected").await;
            return;
        }
    };
    loop {
        let frame = tokio::time::timeout(state.idle_timeout, ws.recv()).await;
        let message = match frame {
            Err(_) => {
                close_with(&mut ws, close_code::NORMAL, "idle timeout").await;
                return;
            }
            Ok(None) => return,
            Ok(Some(Err(_))) => return,
            Ok(Some(Ok(message))) => message,
        };
        match message {
            Message::Text(text) => {
                match run_round(&mut agent, state.mode, text.as_str()).await {
                    Ok(reply) => {
                        if ws.send(Message::Text(reply.into())).await.is_err() {
                            return;
                        }
                    }
                    Err(err) => {
                        // This conversation is broken; the service stays up.
                        close_with(&mut ws, close_code::ERROR, &err.to_string()).await;
                        return;
                    }
                }
            }
            Message::Close(_) => return,
            Message::Binary(_) => {
                close_with(&mut ws, close_code::UNSUPPORTED, "text frames only").await;
                return;
            }
            // Ping/pong are answered by the protocol layer.
            _ => {}
        }
    }
}

async fn run_round<H: crab::AgentHooks>(
    agent: &mut Agent<H>,
    mode: RoundMode,
    text: &str,
) -> Result<String, crab::AgentError> {
    match mode {
        RoundMode::Chat => Ok(agent.chat_round(text).await?.content().to_string()),
        RoundMode::Full => {
            let events = agent.full_round(text).await?;
            let lines: Vec<String> = events
                .iter()
                .filter_map(|event| match event {
                    RoundEvent::AssistantMessage(m) => m
                        .function_call()
                        .map(|call| format!("Thinking ({})...", call.name())),
                    RoundEvent::FunctionResult(_) => None,
                    RoundEvent::FinalMessage(m) => Some(m.content().to_string()),
                })
                .collect();
            Ok(lines.join("\n"))
        }
    }
}
