//! Min-max token split across a fixed participant set.

/// Splits `seq_len` tokens over participants with current loads `loads`,
/// minimising `max_i(loads[i] + split[i])`.
///
/// Tokens go to the least-loaded participants first. When the final level
/// cannot be reached by everyone, the leftover tokens go to the participants
/// with the lowest original load, ties by position.
pub fn water_fill(loads: &[u64], seq_len: u64) -> Vec<u64> {
    let mut split = vec![0; loads.len()];
    if loads.is_empty() || seq_len == 0 {
        return split;
    }
    let fill = |level: u64| -> u64 { loads.iter().map(|&k| level.saturating_sub(k)).sum() };
    let min = *loads.iter().min().expect("non-empty");
    // smallest level whose fill reaches seq_len; fill(min + seq_len) >= seq_len
    let (mut lo, mut hi) = (min, min + seq_len);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fill(mid) >= seq_len {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let level = lo;
    let below = level - 1;
    let mut assigned = 0;
    for (s, &k) in split.iter_mut().zip(loads) {
        *s = below.saturating_sub(k);
        assigned += *s;
    }
    let mut rest = seq_len - assigned;
    let mut topped: Vec<usize> = (0..loads.len()).filter(|&i| loads[i] <= below).collect();
    topped.sort_by_key(|&i| (loads[i], i));
    for i in topped {
        if rest == 0 {
            break;
        }
        split[i] += 1;
        rest -= 1;
    }
    debug_assert_eq!(rest, 0);
    split
}
