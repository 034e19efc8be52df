"""Deep-BSDE pricing of up-and-out barrier calls via a Brownian-bridge terminal payoff."""
