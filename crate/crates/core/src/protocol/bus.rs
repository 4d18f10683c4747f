use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::{Message, Topic, TopicFilter};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Publish/subscribe contract shared by the in-process bus and the framed
/// TCP client.
pub trait Transport: Send + Sync {
    fn publish(&self, topic: &Topic, message: &Message) -> Result<(), TransportError>;
    fn subscribe(&self, filter: &TopicFilter) -> Result<Subscription, TransportError>;
}

/// Receiving end of a subscription. Messages arrive in publish order per
/// topic.
pub struct Subscription {
    rx: Receiver<(Topic, Message)>,
}

impl Subscription {
    pub fn new(rx: Receiver<(Topic, Message)>) -> Self {
        Subscription { rx }
    }

    pub fn try_next(&self) -> Option<(Topic, Message)> {
        self.rx.try_recv().ok()
    }

    pub fn next_timeout(&self, timeout: Duration) -> Result<Option<(Topic, Message)>, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    /// Everything queued right now.
    pub fn drain(&self) -> Vec<(Topic, Message)> {
        self.rx.try_iter().collect()
    }
}

struct Subscriber {
    filter: TopicFilter,
    tx: Sender<(Topic, Message)>,
}

/// In-memory broker. One lock serialises publishes, which keeps per-topic
/// FIFO order for every subscriber.
#[derive(Clone, Default)]
pub struct InProcessBus {
    subscribers: Arc<Mutex<Vec<Subscriber>>>,
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().expect("bus lock").len()
    }
}

impl Transport for InProcessBus {
    fn publish(&self, topic: &Topic, message: &Message) -> Result<(), TransportError> {
        let mut subs = self.subscribers.lock().expect("bus lock");
        subs.retain(|s| {
            !s.filter.matches(topic) || s.tx.send((topic.clone(), message.clone())).is_ok()
        });
        Ok(())
    }

    fn subscribe(&self, filter: &TopicFilter) -> Result<Subscription, TransportError> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.lock().expect("bus lock").push(Subscriber {
            filter: filter.clone(),
            tx,
        });
        Ok(Subscription::new(rx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Channel, GameEvent, EventRecord};
    use crate::model::Timestamp;

    fn event(tick: u64) -> Message {
        Message::Event(EventRecord {
            game_id: "g".into(),
            tick,
            at: Timestamp(tick),
            event: GameEvent::GameStarted,
        })
    }

    #[test]
    fn fifo_per_topic_and_filtering() {
        let bus = InProcessBus::new();
        let all = bus.subscribe(&TopicFilter::game("g").unwrap()).unwrap();
        let bob = bus
            .subscribe(&TopicFilter::parse("game/g/player/bob/#").unwrap())
            .unwrap();
        let ta = Topic::new("g", "alice", Channel::Events).unwrap();
        let tb = Topic::new("g", "bob", Channel::Events).unwrap();
        for i in 0..5 {
            bus.publish(&ta, &event(i)).unwrap();
            bus.publish(&tb, &event(i)).unwrap();
        }
        let got = all.drain();
        assert_eq!(got.len(), 10);
        let alice_ticks: Vec<u64> = got
            .iter()
            .filter(|(t, _)| t == &ta)
            .map(|(_, m)| match m {
                Message::Event(e) => e.tick,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(alice_ticks, [0, 1, 2, 3, 4]);
        assert_eq!(bob.drain().len(), 5);
    }

    #[test]
    fn dropped_subscribers_are_pruned() {
        let bus = InProcessBus::new();
        let sub = bus.subscribe(&TopicFilter::parse("#").unwrap()).unwrap();
        drop(sub);
        bus.publish(&Topic::new("g", "a", Channel::Score).unwrap(), &event(0))
            .unwrap();
        assert_eq!(bus.subscriber_count(), 0);
    }
}
