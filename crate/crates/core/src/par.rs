//! Data-parallel helpers with a sequential fallback.
//!
//! Results always come back in input order, so callers that reduce them
//! sequentially get identical numbers under either executor.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when built with the `parallel` feature; otherwise
    /// behaves like `Sequential`.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

pub fn map<I, O, F>(exec: Exec, items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}

pub fn try_map<I, O, E, F>(exec: Exec, items: Vec<I>, f: F) -> Result<Vec<O>, E>
where
    I: Send,
    O: Send,
    E: Send,
    F: Fn(I) -> Result<O, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executors_agree_in_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(Exec::Sequential, xs.clone(), |x| x * x + 1);
        let b = map(Exec::Parallel, xs, |x| x * x + 1);
        assert_eq!(a, b);
    }

    #[test]
    fn first_error_in_order_wins() {
        let r: Result<Vec<u32>, u32> = try_map(Exec::Parallel, vec![1, 2, 3, 4], |x| {
            if x % 2 == 0 {
                Err(x)
            } else {
                Ok(x)
            }
        });
        assert_eq!(r, Err(2));
    }
}
