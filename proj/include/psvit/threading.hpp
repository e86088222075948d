#pragma once

#include <cstdlib>
#include <string>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace psvit {

// Thread cap for all parallel kernels. Resolution order:
// set_thread_cap() > PSVIT_THREADS env > OpenMP default.
inline int& thread_cap_storage() {
    static int cap = [] {
        if (const char* env = std::getenv("PSVIT_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
#if defined(_OPENMP)
        return omp_get_max_threads();
#else
        return 1;
#endif
    }();
    return cap;
}

inline int thread_cap() { return thread_cap_storage(); }

inline void set_thread_cap(int n) { thread_cap_storage() = n < 1 ? 1 : n; }

}  // namespace psvit
