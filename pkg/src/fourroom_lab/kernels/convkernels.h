#ifndef FRL_CONVKERNELS_H
#define FRL_CONVKERNELS_H

/* Circular 3x3 correlation kernels on 9x9 maps, channel-last layout.
 * x: (B, 81, C), w: (9, C, O) kernel-slot major, y: (B, 81, O).
 * All float32. Summation order is a fixed function of the data, so results
 * are bit-reproducible.
 */

void frl_conv_forward(const float* x, const float* w, const float* bias, float* y,
                      long B, long C, long O, int relu);
void frl_conv_weight_grad(const float* x, const float* dy, float* dw,
                          long B, long C, long O);
void frl_adamw(float* p, const float* g, float* m, float* v, long n,
               double t, double lr, double beta1, double beta2, double eps, double wd);
void frl_lerp(float* target, const float* online, long n, double tau);

#endif
