# cython: boundscheck=False, wraparound=False, language_level=3
"""Bindings for the compiled float32 kernel core (see convkernels.c)."""

cdef extern from "convkernels.h":
    void frl_conv_forward(const float* x, const float* w, const float* bias, float* y,
                          long B, long C, long O, int relu) nogil
    void frl_conv_weight_grad(const float* x, const float* dy, float* dw,
                              long B, long C, long O) nogil
    void frl_adamw(float* p, const float* g, float* m, float* v, long n,
                   double t, double lr, double beta1, double beta2, double eps,
                   double wd) nogil
    void frl_lerp(float* target, const float* online, long n, double tau) nogil


def conv_forward_cl(const float[:, :, ::1] x, const float[:, :, ::1] w, bias,
                    float[:, :, ::1] out, bint relu=False):
    """x (B, 81, C), w (9, C, O), out (B, 81, O); channel-last."""
    cdef long B = x.shape[0], C = x.shape[2], O = w.shape[2]
    cdef const float[::1] bview
    cdef const float* bp = NULL
    cdef int do_relu = 1 if relu else 0
    if bias is not None:
        bview = bias
        bp = &bview[0]
    with nogil:
        frl_conv_forward(&x[0, 0, 0], &w[0, 0, 0], bp, &out[0, 0, 0], B, C, O, do_relu)


def conv_weight_grad_cl(const float[:, :, ::1] x, const float[:, :, ::1] dy,
                        float[:, :, ::1] dw):
    """x (B, 81, C), dy (B, 81, O), dw (9, C, O) overwritten."""
    cdef long B = x.shape[0], C = x.shape[2], O = dy.shape[2]
    with nogil:
        frl_conv_weight_grad(&x[0, 0, 0], &dy[0, 0, 0], &dw[0, 0, 0], B, C, O)


def adamw_update(float[::1] p, const float[::1] g, float[::1] m, float[::1] v,
                 double t, double lr, double beta1, double beta2, double eps, double wd):
    cdef long n = p.shape[0]
    with nogil:
        frl_adamw(&p[0], &g[0], &m[0], &v[0], n, t, lr, beta1, beta2, eps, wd)


def lerp_update(float[::1] target, const float[::1] online, double tau):
    cdef long n = target.shape[0]
    with nogil:
        frl_lerp(&target[0], &online[0], n, tau)
