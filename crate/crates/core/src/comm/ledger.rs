use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Cumulative traffic for one (collective, group, rank) key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub count: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrafficLedger {
    entries: BTreeMap<(String, String, usize), LedgerEntry>,
}

impl TrafficLedger {
    pub fn credit(&mut self, collective: &str, group: &str, rank: usize, sent: u64, received: u64) {
        let e = self
            .entries
            .entry((collective.to_string(), group.to_string(), rank))
            .or_default();
        e.bytes_sent += sent;
        e.bytes_received += received;
        e.count += 1;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(String, String, usize), &LedgerEntry)> {
        self.entries.iter()
    }

    pub fn total_sent(&self) -> u64 {
        self.entries.values().map(|e| e.bytes_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.entries.values().map(|e| e.bytes_received).sum()
    }

    /// Bytes sent by all ranks for one collective kind.
    pub fn sent_by_collective(&self, collective: &str) -> u64 {
        self.entries
            .iter()
            .filter(|((c, _, _), _)| c == collective)
            .map(|(_, e)| e.bytes_sent)
            .sum()
    }

    pub fn sent_by_rank(&self, rank: usize) -> u64 {
        self.entries
            .iter()
            .filter(|((_, _, r), _)| *r == rank)
            .map(|(_, e)| e.bytes_sent)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// `collective,group,rank,bytes,count`, bytes counted on the sender side.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("collective,group,rank,bytes,count\n");
        for ((c, g, r), e) in &self.entries {
            let _ = writeln!(s, "{c},{g},{r},{},{}", e.bytes_sent, e.count);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_dump() {
        let mut l = TrafficLedger::default();
        l.credit("allgather", "ep[0-1]", 0, 16, 16);
        l.credit("allgather", "ep[0-1]", 0, 16, 16);
        l.credit("allgather", "ep[0-1]", 1, 16, 16);
        assert_eq!(
            l.to_csv(),
            "collective,group,rank,bytes,count\nallgather,ep[0-1],0,32,2\nallgather,ep[0-1],1,16,1\n"
        );
        assert_eq!(l.total_sent(), l.total_received());
    }
}
