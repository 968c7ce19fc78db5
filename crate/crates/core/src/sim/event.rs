use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    ClientArrival { site: usize },
    QueryEmit { stream: usize, k: usize },
    /// Query reaches its worker's queue.
    QueryArrival { stream: usize, emit: f64 },
    BatchComplete { worker: usize },
    ResponseDelivered { stream: usize, emit: f64 },
    StreamEnd { stream: usize },
}

impl EventKind {
    /// Events that still have to run after emission stops.
    pub fn in_flight(&self) -> bool {
        matches!(
            self,
            EventKind::QueryArrival { .. } | EventKind::BatchComplete { .. } | EventKind::ResponseDelivered { .. }
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event, FIFO among equal times.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_order_then_fifo() {
        let mut q = EventQueue::default();
        q.push(2.0, EventKind::StreamEnd { stream: 0 });
        q.push(1.0, EventKind::StreamEnd { stream: 1 });
        q.push(1.0, EventKind::StreamEnd { stream: 2 });
        q.push(0.5, EventKind::StreamEnd { stream: 3 });
        let order: Vec<usize> = std::iter::from_fn(|| q.pop())
            .map(|e| match e.kind {
                EventKind::StreamEnd { stream } => stream,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![3, 1, 2, 0]);
    }
}
