use ndarray::ArrayD;
use vlsme_tensor::Graph;

#[test]
fn head_linear_backward() {
    // (N,T,D) -> (D,1) head, like the decoder's token-to-pixel map
    let mut g = Graph::new();
    let x = g.leaf(ArrayD::ones(ndarray::IxDyn(&[1, 16, 64])));
    let w = g.leaf(ArrayD::ones(ndarray::IxDyn(&[64, 1])));
    let b = g.leaf(ArrayD::ones(ndarray::IxDyn(&[1])));
    let y = g.linear(x, w, Some(b));
    let grid = g.tokens_to_grid(y, 4);
    let up = g.bilinear_resize(grid, 8, 8);
    let s = g.sum_all(up);
    let grads = g.backward(s);
    assert!(grads.wrt(x).is_some());
}
