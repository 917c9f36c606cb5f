/// Mean softmax cross-entropy over a batch.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub correct: usize,
    /// `dL/dlogits`, already divided by the batch size.
    pub grad: Vec<f32>,
}

pub fn cross_entropy(logits: &[f32], labels: &[u8], classes: usize) -> CrossEntropy {
    let n = labels.len();
    assert_eq!(logits.len(), n * classes);
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for &v in row {
            z += ((v - max) as f64).exp();
        }
        let y = y as usize;
        loss += z.ln() - (row[y] - max) as f64;
        if argmax(row) == y {
            correct += 1;
        }
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (j, &v) in row.iter().enumerate() {
            let p = ((v - max) as f64).exp() / z;
            let t = if j == y { 1.0 } else { 0.0 };
            g[j] = ((p - t) / n as f64) as f32;
        }
    }
    CrossEntropy {
        loss: loss / n.max(1) as f64,
        correct,
        grad,
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
