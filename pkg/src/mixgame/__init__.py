"""Mixed-strategy game-theoretic crowd navigation with a learned interaction cost.

Modules:
    diffkit    reverse-mode autodiff on numpy arrays
    dynamics   unicycle model and trajectory helpers
    lqgame     iLQGames feedback-Nash solver and MPC wrapper (the simulated crowd)
    cvae       conditional VAE producing nominal trajectory samples
    brne       sample-based mixed-strategy Nash equilibrium
    inverse    learned pairwise cost and its training through unrolled BRNE
    benchmark  circle-crossing scenarios, policies and metrics
    cli        ``mixgame`` command line entry point
"""

__version__ = "0.1.0"
