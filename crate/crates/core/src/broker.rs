//! Topic-based publish/subscribe with MQTT-style topic trees.
//!
//! `+` matches exactly one level, `#` matches the remaining levels (including
//! none, so `a/#` matches `a`). Delivery is at-most-once and each subscriber gets
//! one copy per publish no matter how many of its filters match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopicError {
    #[error("empty topic")]
    Empty,
    #[error("empty level in {0:?}")]
    EmptyLevel(String),
    #[error("wildcard in topic name {0:?}")]
    WildcardInName(String),
    #[error("'#' must be the last level in {0:?}")]
    MisplacedHash(String),
    #[error("wildcard mixed with text in level {0:?}")]
    PartialWildcard(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicName {
    levels: Vec<String>,
}

impl TopicName {
    pub fn levels(&self) -> &[String] {
        &self.levels
    }
}

impl FromStr for TopicName {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        let mut levels = Vec::new();
        for level in s.split('/') {
            if level.is_empty() {
                return Err(TopicError::EmptyLevel(s.to_string()));
            }
            if level.contains(['#', '+']) {
                return Err(TopicError::WildcardInName(s.to_string()));
            }
            levels.push(level.to_string());
        }
        Ok(Self { levels })
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.levels.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterLevel {
    Literal(String),
    SingleLevel,
    MultiLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicFilter {
    levels: Vec<FilterLevel>,
}

impl TopicFilter {
    pub fn levels(&self) -> &[FilterLevel] {
        &self.levels
    }

    pub fn has_wildcards(&self) -> bool {
        self.levels
            .iter()
            .any(|l| !matches!(l, FilterLevel::Literal(_)))
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        let parts: Vec<&str> = s.split('/').collect();
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "" => return Err(TopicError::EmptyLevel(s.to_string())),
                "+" => FilterLevel::SingleLevel,
                "#" if i + 1 == parts.len() => FilterLevel::MultiLevel,
                "#" => return Err(TopicError::MisplacedHash(s.to_string())),
                p if p.contains(['#', '+']) => {
                    return Err(TopicError::PartialWildcard(p.to_string()))
                }
                p => FilterLevel::Literal(p.to_string()),
            };
            levels.push(level);
        }
        Ok(Self { levels })
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .levels
            .iter()
            .map(|l| match l {
                FilterLevel::Literal(s) => s.as_str(),
                FilterLevel::SingleLevel => "+",
                FilterLevel::MultiLevel => "#",
            })
            .collect();
        f.write_str(&parts.join("/"))
    }
}

impl From<&TopicName> for TopicFilter {
    fn from(t: &TopicName) -> Self {
        Self {
            levels: t.levels.iter().cloned().map(FilterLevel::Literal).collect(),
        }
    }
}

pub fn topic_matches(filter: &TopicFilter, topic: &TopicName) -> bool {
    let mut names = topic.levels.iter();
    for level in &filter.levels {
        match level {
            FilterLevel::MultiLevel => return true,
            FilterLevel::SingleLevel => {
                if names.next().is_none() {
                    return false;
                }
            }
            FilterLevel::Literal(lit) => match names.next() {
                Some(name) if name == lit => {}
                _ => return false,
            },
        }
    }
    names.next().is_none()
}

pub type SubscriberId = String;

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub subscriber: SubscriberId,
    pub topic: TopicName,
    pub payload: Vec<u8>,
}

#[derive(Debug, Default)]
struct Node {
    children: BTreeMap<String, Node>,
    single: Option<Box<Node>>,
    /// Subscribers whose filter ends with `#` at this position.
    multi: BTreeSet<SubscriberId>,
    /// Subscribers whose filter ends exactly here.
    exact: BTreeSet<SubscriberId>,
}

impl Node {
    fn is_empty(&self) -> bool {
        self.children.is_empty()
            && self.single.is_none()
            && self.multi.is_empty()
            && self.exact.is_empty()
    }

    fn insert(&mut self, levels: &[FilterLevel], who: &str) {
        match levels.split_first() {
            None => {
                self.exact.insert(who.to_string());
            }
            Some((FilterLevel::MultiLevel, _)) => {
                self.multi.insert(who.to_string());
            }
            Some((FilterLevel::SingleLevel, rest)) => self
                .single
                .get_or_insert_with(Default::default)
                .insert(rest, who),
            Some((FilterLevel::Literal(l), rest)) => self
                .children
                .entry(l.clone())
                .or_default()
                .insert(rest, who),
        }
    }

    fn remove(&mut self, levels: &[FilterLevel], who: &str) {
        match levels.split_first() {
            None => {
                self.exact.remove(who);
            }
            Some((FilterLevel::MultiLevel, _)) => {
                self.multi.remove(who);
            }
            Some((FilterLevel::SingleLevel, rest)) => {
                if let Some(child) = self.single.as_mut() {
                    child.remove(rest, who);
                    if child.is_empty() {
                        self.single = None;
                    }
                }
            }
            Some((FilterLevel::Literal(l), rest)) => {
                if let Some(child) = self.children.get_mut(l) {
                    child.remove(rest, who);
                    if child.is_empty() {
                        self.children.remove(l);
                    }
                }
            }
        }
    }

    fn collect(&self, levels: &[String], out: &mut BTreeSet<SubscriberId>) {
        out.extend(self.multi.iter().cloned());
        match levels.split_first() {
            None => out.extend(self.exact.iter().cloned()),
            Some((head, rest)) => {
                if let Some(child) = self.children.get(head) {
                    child.collect(rest, out);
                }
                if let Some(child) = &self.single {
                    child.collect(rest, out);
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Broker {
    root: Node,
    subscriptions: BTreeSet<(SubscriberId, TopicFilter)>,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the (subscriber, filter) pair already existed.
    pub fn subscribe(&mut self, subscriber: &str, filter: TopicFilter) -> bool {
        if !self
            .subscriptions
            .insert((subscriber.to_string(), filter.clone()))
        {
            return false;
        }
        self.root.insert(&filter.levels, subscriber);
        true
    }

    pub fn subscribe_str(&mut self, subscriber: &str, filter: &str) -> Result<bool, TopicError> {
        Ok(self.subscribe(subscriber, filter.parse()?))
    }

    pub fn unsubscribe(&mut self, subscriber: &str, filter: &TopicFilter) -> bool {
        if !self
            .subscriptions
            .remove(&(subscriber.to_string(), filter.clone()))
        {
            return false;
        }
        self.root.remove(&filter.levels, subscriber);
        true
    }

    /// Subscribers with at least one filter matching `topic`, sorted.
    pub fn matching_subscribers(&self, topic: &TopicName) -> Vec<SubscriberId> {
        let mut out = BTreeSet::new();
        self.root.collect(&topic.levels, &mut out);
        out.into_iter().collect()
    }

    pub fn publish(&mut self, topic: &TopicName, payload: &[u8]) -> Vec<Delivery> {
        self.matching_subscribers(topic)
            .into_iter()
            .map(|subscriber| Delivery {
                subscriber,
                topic: topic.clone(),
                payload: payload.to_vec(),
            })
            .collect()
    }

    /// Parses `topic` as a literal name before publishing; wildcards are rejected.
    pub fn publish_str(
        &mut self,
        topic: &str,
        payload: &[u8],
    ) -> Result<Vec<Delivery>, TopicError> {
        Ok(self.publish(&topic.parse()?, payload))
    }

    pub fn subscription_count(&self) -> usize {
        self.subscriptions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(filter: &str, topic: &str) -> bool {
        topic_matches(&filter.parse().unwrap(), &topic.parse().unwrap())
    }

    #[test]
    fn wildcard_examples() {
        assert!(m("REGION_1/ZONE_1/#", "REGION_1/ZONE_1/Node_2/Topic_1"));
        assert!(m("REGION_1/+/+/Topic_1", "REGION_1/ZONE_1/Node_2/Topic_1"));
        assert!(!m("REGION_1/+/Topic_1", "REGION_1/ZONE_1/Node_2/Topic_1"));
        assert!(m("a/#", "a"));
        assert!(m("#", "x/y/z"));
        assert!(!m("a/+", "a"));
        assert!(!m("a/+", "a/b/c"));
        assert!(m("+", "a"));
        assert!(!m("a/b", "a/b/c"));
    }

    #[test]
    fn malformed_filters() {
        assert_eq!(
            "a/#/b".parse::<TopicFilter>(),
            Err(TopicError::MisplacedHash("a/#/b".into()))
        );
        assert!("a/b+".parse::<TopicFilter>().is_err());
        assert!("a//b".parse::<TopicFilter>().is_err());
        assert!("".parse::<TopicFilter>().is_err());
        assert!("a/+".parse::<TopicName>().is_err());
        assert_eq!(
            "REGION_1/+/Topic_1"
                .parse::<TopicFilter>()
                .unwrap()
                .to_string(),
            "REGION_1/+/Topic_1"
        );
    }

    #[test]
    fn delivery_semantics() {
        let mut b = Broker::new();
        assert!(b.publish_str("a/b", b"x").unwrap().is_empty());

        b.subscribe_str("all", "#").unwrap();
        assert_eq!(b.publish_str("anything/at/all", b"x").unwrap().len(), 1);

        b.subscribe_str("s", "a/+").unwrap();
        b.subscribe_str("s", "a/#").unwrap();
        let d = b.publish_str("a/b", b"x").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.iter().filter(|d| d.subscriber == "s").count(), 1);

        assert!(!b.subscribe_str("s", "a/+").unwrap());
        assert!(b.unsubscribe("s", &"a/+".parse().unwrap()));
        assert!(b.unsubscribe("s", &"a/#".parse().unwrap()));
        assert!(!b.unsubscribe("s", &"a/#".parse().unwrap()));
        let d = b.publish_str("a/b", b"x").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].subscriber, "all");

        assert_eq!(
            b.publish_str("a/+", b"x"),
            Err(TopicError::WildcardInName("a/+".into()))
        );
    }

    #[test]
    fn per_subscriber_order_follows_publish_order() {
        let mut b = Broker::new();
        b.subscribe_str("s", "t/#").unwrap();
        let mut inbox = Vec::new();
        for i in 0..10u8 {
            inbox.extend(b.publish_str("t/x", &[i]).unwrap());
        }
        let seen: Vec<u8> = inbox.iter().map(|d| d.payload[0]).collect();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
