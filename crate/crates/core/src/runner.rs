//! Running components on their own threads.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::components::{Component, ComponentError};
use crate::roles::Role;

/// How long one step may block waiting for new entries. Bounds how quickly a
/// stop request is noticed.
pub const DEFAULT_POLL: Duration = Duration::from_millis(50);

/// Steps `component` until `stop` is set or a terminal error occurs.
/// Non-terminal errors are logged and retried after a short pause.
pub fn run_loop(
    component: &mut dyn Component,
    stop: &AtomicBool,
    poll: Duration,
) -> Result<(), ComponentError> {
    while !stop.load(Ordering::SeqCst) {
        match component.step(poll) {
            Ok(_) => {}
            Err(e) if e.is_terminal() => {
                tracing::warn!(component = component.id(), error = %e, "component stopped");
                return Err(e);
            }
            Err(e) => {
                tracing::warn!(component = component.id(), error = %e, "step failed, retrying");
                std::thread::sleep(poll);
            }
        }
    }
    Ok(())
}

/// A component running on a background thread.
pub struct ComponentHandle {
    id: String,
    role: Role,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<(), ComponentError>>>,
}

impl ComponentHandle {
    pub fn spawn(mut component: Box<dyn Component>, poll: Duration) -> Self {
        let id = component.id().to_string();
        let role = component.role();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name(format!("{role}:{id}"))
            .spawn(move || run_loop(component.as_mut(), &flag, poll))
            .expect("spawn component thread");
        ComponentHandle {
            id,
            role,
            stop,
            thread: Some(thread),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Asks the component to stop after its current step.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Stops the component and waits for its thread.
    pub fn stop(mut self) -> Result<(), ComponentError> {
        self.request_stop();
        self.join_inner()
    }

    fn join_inner(&mut self) -> Result<(), ComponentError> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(ComponentError::Config(format!("{} panicked", self.id)))),
            None => Ok(()),
        }
    }
}

impl Drop for ComponentHandle {
    fn drop(&mut self) {
        self.request_stop();
        let _ = self.join_inner();
    }
}
