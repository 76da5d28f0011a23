use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum-SGD update:
/// `buf ← momentum·buf + grad + weight_decay·w`, `w ← w − lr·buf`.
/// Gradients are cleared afterwards. Every parameter must carry a
/// gradient; nothing is updated otherwise.
pub fn sgd_step<T: Scalar>(params: &mut [(&str, &mut Parameter<T>)], cfg: SgdConfig) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.tensor.grad.is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    let (lr, mu, wd) = (T::lit(cfg.lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for (_, p) in params.iter_mut() {
        let grad = p.tensor.grad.take().expect("checked above");
        let Parameter { tensor, momentum } = &mut **p;
        for ((w, buf), g) in tensor.data_mut().iter_mut().zip(momentum.iter_mut()).zip(grad) {
            *buf = mu * *buf + g + wd * *w;
            *w = *w - lr * *buf;
        }
    }
    Ok(())
}
