//! Single-threaded task executor driven by the virtual clock.

use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

type Task = Pin<Box<dyn Future<Output = ()>>>;

pub(crate) struct Executor {
    tasks: Vec<Option<Task>>,
    free: Vec<usize>,
    ready: Arc<Mutex<VecDeque<usize>>>,
    live: usize,
}

struct TaskWaker {
    id: usize,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        let mut q = self.ready.lock().expect("ready queue poisoned");
        if !q.contains(&self.id) {
            q.push_back(self.id);
        }
    }
}

impl Executor {
    pub(crate) fn new() -> Self {
        Executor { tasks: Vec::new(), free: Vec::new(), ready: Arc::default(), live: 0 }
    }

    pub(crate) fn spawn(&mut self, fut: Task) {
        let id = match self.free.pop() {
            Some(id) => {
                self.tasks[id] = Some(fut);
                id
            }
            None => {
                self.tasks.push(Some(fut));
                self.tasks.len() - 1
            }
        };
        self.live += 1;
        self.ready.lock().expect("ready queue poisoned").push_back(id);
    }

    pub(crate) fn live_tasks(&self) -> usize {
        self.live
    }

    /// Takes the next runnable task out of its slot.
    pub(crate) fn next_ready(&mut self) -> Option<(usize, Task, Waker)> {
        loop {
            let id = self.ready.lock().expect("ready queue poisoned").pop_front()?;
            if let Some(task) = self.tasks.get_mut(id).and_then(Option::take) {
                let waker = Waker::from(Arc::new(TaskWaker { id, ready: self.ready.clone() }));
                return Some((id, task, waker));
            }
        }
    }

    pub(crate) fn restore(&mut self, id: usize, task: Task) {
        self.tasks[id] = Some(task);
    }

    pub(crate) fn retire(&mut self, id: usize) {
        self.free.push(id);
        self.live -= 1;
    }
}

/// Polls `task` outside any executor borrow so it may spawn or wake freely.
pub(crate) fn poll_task(task: &mut Task, waker: &Waker) -> Poll<()> {
    task.as_mut().poll(&mut Context::from_waker(waker))
}
