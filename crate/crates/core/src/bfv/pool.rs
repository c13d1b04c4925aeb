use std::sync::Mutex;

/// Recycles RNS-sized scratch buffers so hot loops do not allocate.
#[derive(Debug)]
pub struct BufferPool {
    len: usize,
    free: Mutex<Vec<Vec<u64>>>,
}

impl BufferPool {
    pub fn new(len: usize) -> Self {
        BufferPool {
            len,
            free: Mutex::new(Vec::new()),
        }
    }

    /// A zeroed buffer of the pool's length.
    pub fn take(&self) -> Vec<u64> {
        let reused = self.free.lock().unwrap().pop();
        match reused {
            Some(mut v) => {
                v.iter_mut().for_each(|x| *x = 0);
                v
            }
            None => vec![0; self.len],
        }
    }

    pub fn give(&self, v: Vec<u64>) {
        if v.len() == self.len {
            let mut free = self.free.lock().unwrap();
            // bound the number of cached buffers
            if free.len() < 64 {
                free.push(v);
            }
        }
    }

    pub fn cached(&self) -> usize {
        self.free.lock().unwrap().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reuses_buffers() {
        let p = BufferPool::new(8);
        let mut a = p.take();
        a[0] = 7;
        p.give(a);
        assert_eq!(p.cached(), 1);
        let b = p.take();
        assert_eq!(b, vec![0; 8]);
        assert_eq!(p.cached(), 0);
        p.give(vec![1; 3]);
        assert_eq!(p.cached(), 0);
    }
}
