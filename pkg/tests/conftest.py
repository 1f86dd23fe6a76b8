import numpy as np
import pytest

from dabul import direct as direct_mod
from dabul import geo, model, survey


@pytest.fixture(scope="session")
def small_geography():
    return geo.generate_synthetic_geography(2, 4, seed=0)


@pytest.fixture(scope="session")
def small_structure(small_geography):
    return geo.build_icar_structure(small_geography, nesting="per_admin1")


def make_micro_case():
    """1 admin1, 2 admin2, 3 clusters (third unsampled); latent space is tiny
    so the joint posterior over (Y^(s), Y_+) can be enumerated exhaustively."""
    g = geo._build_geography(np.array([0, 0]), {(0, 1)})
    st = geo.build_icar_structure(g)
    pop = survey.PopulationFrame(
        cluster_id=np.array([1, 2, 3]), admin1=np.array([1, 1, 1]),
        admin2=np.array([1, 2, 2]), stratum=np.array([0, 1, 1]),
        births=np.array([6, 6, 5]), deaths=np.array([1, 0, 1]), m1=1, m2=2)
    sd = survey.SurveyData(
        cluster_id=pop.cluster_id, gamma=np.array([1, 1, 0]),
        samp_births=np.array([3, 2, 0]), samp_deaths=np.array([1, 0, 0]),
        weight=np.array([2.0, 3.0, 0.0]), admin1=pop.admin1, admin2=pop.admin2,
        stratum=pop.stratum)
    est = direct_mod.DirectEstimates(
        r_hat=np.array([0.2]), v_logit=np.array([0.5]),
        n_clusters=np.array([2]), n_births=np.array([5]), n_deaths=np.array([1]),
        degenerate=np.array([False]))
    data = model.build_model_data(pop, sd, g)
    return g, st, pop, sd, est, data


@pytest.fixture(scope="session")
def micro_case():
    return make_micro_case()


def make_small_survey(seed=7, n_admin1=2, admin2_per=4):
    """Small but non-trivial population + survey + direct estimates."""
    g = geo.generate_synthetic_geography(n_admin1, admin2_per, seed=0)
    st = geo.build_icar_structure(g)
    setting = survey.get_setting(
        "1", urban_clusters_mean=30, urban_clusters_sd=3,
        rural_clusters_mean=30, rural_clusters_sd=3,
        urban_births_mean=40, urban_births_sd=4,
        rural_births_mean=50, rural_births_sd=5,
        urban_frac=0.3, rural_frac=0.3)
    pop = survey.synthesize_population(setting, g, seed=seed)
    rates, _, _, _ = survey.draw_risk_surface(setting, g, pop, seed=seed, structure=st)
    pop = survey.draw_outcomes(pop, rates, setting.d_true, seed=seed)
    sd = survey.sample_survey(pop, setting, seed=seed)
    est = direct_mod.compute_direct_estimates(sd, g.m1)
    data = model.build_model_data(pop, sd, g)
    return g, st, setting, pop, sd, est, data


@pytest.fixture(scope="session")
def small_survey_case():
    return make_small_survey()
