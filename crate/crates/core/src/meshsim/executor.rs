//! Worker threads that run core programs.
//!
//! Every core owns a FIFO of pending jobs. A core is handed to at most one
//! worker at a time, so jobs of one core run serially in submission order
//! while different cores proceed in parallel on different workers.

use std::collections::VecDeque;
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

pub(crate) type Job = Box<dyn FnOnce() + Send + 'static>;

enum Message {
    Ready(usize),
    Shutdown,
}

#[derive(Default)]
struct CoreQueue {
    jobs: VecDeque<Job>,
    scheduled: bool,
}

pub(crate) struct Executor {
    queues: Arc<Vec<Mutex<CoreQueue>>>,
    ready: Sender<Message>,
    workers: usize,
}

impl Executor {
    pub(crate) fn new(num_cores: usize, workers: usize) -> Self {
        let queues: Arc<Vec<Mutex<CoreQueue>>> =
            Arc::new((0..num_cores).map(|_| Mutex::new(CoreQueue::default())).collect());
        let (tx, rx) = unbounded();
        for w in 0..workers {
            let queues = Arc::clone(&queues);
            let rx: Receiver<Message> = rx.clone();
            let tx = tx.clone();
            thread::Builder::new()
                .name(format!("meshsim-worker-{w}"))
                .spawn(move || worker_loop(&queues, &rx, &tx))
                .expect("spawn mesh worker");
        }
        Executor {
            queues,
            ready: tx,
            workers,
        }
    }

    pub(crate) fn submit(&self, core: usize, job: Job) {
        let mut q = self.queues[core].lock();
        q.jobs.push_back(job);
        if !q.scheduled {
            q.scheduled = true;
            // Workers never drop the receiver before shutdown.
            let _ = self.ready.send(Message::Ready(core));
        }
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        for _ in 0..self.workers {
            let _ = self.ready.send(Message::Shutdown);
        }
    }
}

fn worker_loop(queues: &[Mutex<CoreQueue>], rx: &Receiver<Message>, tx: &Sender<Message>) {
    while let Ok(Message::Ready(core)) = rx.recv() {
        let job = queues[core].lock().jobs.pop_front();
        if let Some(job) = job {
            job();
        }
        let mut q = queues[core].lock();
        if q.jobs.is_empty() {
            q.scheduled = false;
        } else {
            let _ = tx.send(Message::Ready(core));
        }
    }
}
