use crate::error::{Error, Result};
use crate::tensor::IndexTensor;

/// Bytes moved by the two Stage-1 token exchange strategies, summed over all
/// EP ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenExchangeVolume {
    pub allgather_bytes: u64,
    pub all2all_bytes: u64,
}

/// Compare broadcasting every token to every EP rank (allgather) against
/// sending each token only to the ranks that host one of its chosen experts
/// (all2all). `routing` is the gathered `[S*EP, K]` expert table; token `t`
/// originates on rank `t / S`, and expert `e` lives on rank `e / (N/EP)`.
pub fn volume_compare_allgather_vs_all2all(
    tokens_per_rank: usize,
    hidden: usize,
    num_experts: usize,
    ep: usize,
    routing: &IndexTensor,
    dtype_size: usize,
) -> Result<TokenExchangeVolume> {
    let op = "volume_compare_allgather_vs_all2all";
    if ep == 0 || !num_experts.is_multiple_of(ep) {
        return Err(Error::contract(op, format!("{num_experts} experts over ep={ep}")));
    }
    if routing.ndim() != 2 || routing.dim(0) != tokens_per_rank * ep {
        return Err(Error::contract(
            op,
            format!("routing {:?} for S={tokens_per_rank}, EP={ep}", routing.shape()),
        ));
    }
    let per_rank = num_experts / ep;
    let token_bytes = (hidden * dtype_size) as u64;
    let allgather_bytes = (ep * (ep - 1) * tokens_per_rank) as u64 * token_bytes;
    let mut all2all_bytes = 0u64;
    let mut needed = vec![false; ep];
    for t in 0..routing.dim(0) {
        let origin = t / tokens_per_rank.max(1);
        needed.iter_mut().for_each(|n| *n = false);
        for &e in routing.row(t) {
            if e >= num_experts {
                return Err(Error::contract(op, format!("expert id {e} >= {num_experts}")));
            }
            needed[e / per_rank] = true;
        }
        let remote = needed.iter().enumerate().filter(|&(r, &n)| n && r != origin).count();
        all2all_bytes += remote as u64 * token_bytes;
    }
    Ok(TokenExchangeVolume {
        allgather_bytes,
        all2all_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ep1_moves_nothing() {
        let routing = Tensor::new(&[4, 2], vec![0, 1, 2, 3, 0, 2, 1, 3]).unwrap();
        let v = volume_compare_allgather_vs_all2all(4, 8, 4, 1, &routing, 4).unwrap();
        assert_eq!(v, TokenExchangeVolume { allgather_bytes: 0, all2all_bytes: 0 });
    }

    #[test]
    fn local_only_routing_needs_no_all2all() {
        // 2 ranks x 2 tokens, experts {0,1} on rank 0 and {2,3} on rank 1
        let routing = Tensor::new(&[4, 1], vec![0, 1, 2, 3]).unwrap();
        let v = volume_compare_allgather_vs_all2all(2, 8, 4, 2, &routing, 4).unwrap();
        assert_eq!(v.all2all_bytes, 0);
        assert_eq!(v.allgather_bytes, 2 * 2 * 8 * 4);
    }

    #[test]
    fn every_token_everywhere_is_equality() {
        let routing = Tensor::new(&[4, 2], vec![0, 2, 1, 3, 0, 3, 1, 2]).unwrap();
        let v = volume_compare_allgather_vs_all2all(2, 8, 4, 2, &routing, 4).unwrap();
        assert_eq!(v.all2all_bytes, v.allgather_bytes);
    }
}
