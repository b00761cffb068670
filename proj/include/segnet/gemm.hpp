#pragma once

#include <cstdint>

namespace segnet {

// Three accumulate-GEMM micro-kernels covering conv2d/matmul_1x1 forward and
// backward. Each output row is produced by exactly one thread with a fixed
// reduction order, so results are bit-identical across thread counts.

// C(MxN) += A(MxK) * B(KxN)
template <class T>
void gemm_nn_acc(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
    for (int64_t m = 0; m < M; ++m) {
        const T* a_row = A + m * K;
        T* c_row = C + m * N;
        for (int64_t k = 0; k < K; ++k) {
            const T a = a_row[k];
            const T* b_row = B + k * N;
            for (int64_t n = 0; n < N; ++n) c_row[n] += a * b_row[n];
        }
    }
}

// C(MxN) += A^T * B where A is KxM, B is KxN
template <class T>
void gemm_tn_acc(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
    for (int64_t m = 0; m < M; ++m) {
        T* c_row = C + m * N;
        for (int64_t k = 0; k < K; ++k) {
            const T a = A[k * M + m];
            const T* b_row = B + k * N;
            for (int64_t n = 0; n < N; ++n) c_row[n] += a * b_row[n];
        }
    }
}

// C(MxN) += A * B^T where A is MxK, B is NxK
template <class T>
void gemm_nt_acc(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
    for (int64_t m = 0; m < M; ++m) {
        const T* a_row = A + m * K;
        T* c_row = C + m * N;
        for (int64_t n = 0; n < N; ++n) {
            const T* b_row = B + n * K;
            T acc = T(0);
            for (int64_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
            c_row[n] += acc;
        }
    }
}

}  // namespace segnet
