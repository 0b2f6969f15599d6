"""Greedy sensor placement for a Fourier space and the resulting inf-sup constants."""
from redinv import Dictionary, Mesh, collective_omp, compute_J_fourier, fourier_space, worst_case_omp


def main():
    mesh = Mesh(511)
    D = Dictionary(mesh)
    for n in (2, 3, 5):
        V = fourier_space(mesh, n)
        col = collective_omp(V, D, 0.9, m_max=60)
        wc = worst_case_omp(V, D, 0.9, m_max=60)
        print(f"n={n}  J={compute_J_fourier(n):.3f}  collective m={col.m} beta={col.beta_history[-1]:.3f}"
              f"  worst-case m={wc.m} beta={wc.beta_history[-1]:.3f}")


if __name__ == "__main__":
    main()
